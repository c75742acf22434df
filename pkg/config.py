"""
JSON-backed configuration for the correspondence pipeline.
Holds every default constant (model, losses, training, refinement, data)
and the named presets; a user file only needs the keys it overrides.
"""
import copy
import json
import logging
import os
from typing import Dict

logger = logging.getLogger(__name__)

CONFIG_PATH = "equishape.json"

MODEL_PRESETS: Dict[str, Dict[str, object]] = {
    'base': {'edgeconv_channels': [64, 64, 128, 256, 512]},
    'large': {'edgeconv_channels': [96, 192, 384, 768, 512]},
}

# 1e-8 suits the scale of scanned benchmark shapes; unit-radius synthetic clouds need a larger step
REFINE_PRESETS: Dict[str, Dict[str, object]] = {
    'reference': {'lr': 1e-8, 'steps': 100},
    'synthetic': {'lr': 1e-3, 'steps': 100},
}

DEFAULT_CONFIG: Dict[str, Dict[str, object]] = {
    'model': {
        'preset': 'base',
        'k': 27,
        'layers': 3,
        'dim': 64,
        'vector_dim': 16,
        'lrf_dim': 64,
        'edgeconv_channels': [64, 64, 128, 256, 512],
        'cross_attention': True,
        'lrf_mode': 'learned',  # 'learned' or 'covariance'
        'seed': 0,
    },
    'loss': {
        'lambda_cc': 1.0,
        'lambda_sc': 10.0,
        'lambda_m': 1.0,
        'k_latent': 10,
        'alpha': 0.01,
    },
    'train': {
        'batch_size': 8,
        'epochs': 30,
        'lr': 3e-4,
        'lr_milestones': [6, 9],
        'lr_factor': 0.1,
        'val_fraction': 0.2,
        'seed': 0,
    },
    'refine': {
        'preset': 'reference',
        'lr': 1e-8,
        'steps': 100,
        'beta1': 0.9,
        'beta2': 0.999,
        'eps': 1e-8,
        'strict_frames': False,
    },
    'data': {
        'segment_count': 5,
        'points': 256,
        'joint_angle_range': 0.6,
        'ood_joint_angle_range': 1.2,
        'segment_length_range': [0.5, 1.0],
        'radius_range': [0.08, 0.2],
        'global_transform': True,
        'normalize': True,
        'seed': 0,
    },
    'check': {
        'equivariance_trials': 100,
        'invariance_trials': 50,
        'points': 64,
    },
    'threads': None,
}


def default_config() -> Dict[str, Dict[str, object]]:
    return copy.deepcopy(DEFAULT_CONFIG)


def merge_config(base: Dict[str, object], overrides: Dict[str, object]) -> Dict[str, object]:
    """Overlay `overrides` on `base` one section deep; unknown keys are kept."""
    cfg = copy.deepcopy(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def load_config(path: str = CONFIG_PATH) -> Dict[str, Dict[str, object]]:
    """Load a JSON config merged over the defaults.

    A missing file gives the defaults; an unreadable or non-object file is
    logged and ignored.
    """
    if os.path.exists(path):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
            if not isinstance(data, dict):
                logger.warning("Config %s is not a JSON object; using defaults", path)
                return default_config()
            return merge_config(DEFAULT_CONFIG, data)
        except (OSError, ValueError) as exc:
            logger.warning("Could not read config %s (%s); using defaults", path, exc)
            return default_config()
    return default_config()


def save_config(config: Dict[str, object], path: str = CONFIG_PATH) -> None:
    """Write `config` as sorted, indented JSON through a temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    logger.debug("Saved config to %s", path)


def run_snapshot(cfg: Dict[str, object], train: Dict[str, object], model: Dict[str, object],
                 loss: Dict[str, object]) -> Dict[str, object]:
    """The config a training run actually used: `cfg` with its resolved sections."""
    return merge_config(cfg, {"train": train, "model": model, "loss": loss})


def apply_model_preset(section: Dict[str, object], preset: str) -> Dict[str, object]:
    if preset not in MODEL_PRESETS:
        raise ValueError(f"Unknown model preset {preset!r}; choose from {sorted(MODEL_PRESETS)}")
    out = dict(section)
    out.update(MODEL_PRESETS[preset])
    out['preset'] = preset
    return out


def apply_refine_preset(section: Dict[str, object], preset: str) -> Dict[str, object]:
    if preset not in REFINE_PRESETS:
        raise ValueError(f"Unknown refine preset {preset!r}; choose from {sorted(REFINE_PRESETS)}")
    out = dict(section)
    out.update(REFINE_PRESETS[preset])
    out['preset'] = preset
    return out


def resolve_threads(cli_value=None, config: Dict[str, object] = None) -> int:
    """Thread count: EQLF_THREADS beats --threads, which beats the config, then all cores."""
    env = os.environ.get('EQLF_THREADS')
    if env:
        try:
            value = int(env)
            if value >= 1:
                return value
        except ValueError:
            pass
        logger.warning("Ignoring invalid EQLF_THREADS=%r", env)
    if cli_value:
        return max(1, int(cli_value))
    if config and config.get('threads'):
        return max(1, int(config['threads']))
    return os.cpu_count() or 1
