"""
Training: Adam, the milestone learning-rate schedule, the epoch loop over
shape pairs, and checkpoint persistence (.eqlf).

Checkpoint layout (little-endian):
    b"EQLF" | u32 version | u32 len | config JSON | u32 count | tensors...
    | u8 has_optimizer | [u64 step | tensors (m) | tensors (v)]
    tensor := u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim] | f32 payload
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import matcher
from config import DEFAULT_CONFIG
from data import ShapePair
from geometry import make_rng
from model import EquiShapeConfig, Model
from storage import PairMismatchError
from tensor import Tape, backward

logger = logging.getLogger(__name__)

MAGIC = b"EQLF"
FORMAT_VERSION = 1
CHECKPOINT_EXT = ".eqlf"


class TrainingDiverged(ArithmeticError):
    """Raised when a gradient contains NaN or Inf; the step is not applied."""


class CheckpointError(IOError):
    """Raised for unreadable, corrupted or mismatched checkpoint files."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    lr: float = 3e-4
    lr_milestones: Tuple[int, ...] = (6, 9)
    lr_factor: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0
    threads: int = 1
    model: EquiShapeConfig = field(default_factory=EquiShapeConfig)
    loss: matcher.LossConfig = field(default_factory=matcher.LossConfig)

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ValueError("batch_size must be >= 1, epochs and lr non-negative")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ValueError(f"lr milestones must be strictly increasing: {self.lr_milestones}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, train: Optional[Mapping[str, object]] = None, model: Optional[Mapping[str, object]] = None,
                  loss: Optional[Mapping[str, object]] = None, threads: int = 1) -> "TrainConfig":
        merged = dict(DEFAULT_CONFIG['train'])
        merged.update(train or {})
        return cls(int(merged['batch_size']), int(merged['epochs']), float(merged['lr']),
                   tuple(merged['lr_milestones']), float(merged['lr_factor']), float(merged['val_fraction']),
                   int(merged['seed']), int(threads), EquiShapeConfig.from_dict(model), matcher.LossConfig.from_dict(loss))


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class EpochLog:
    epoch: int
    loss_total: float
    loss_cons: float
    loss_map: float
    val_acc_001: float
    val_acc_005: float
    lr: float

    def to_row(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class TrainResult:
    model: Model
    log: List[EpochLog]
    optimizer: AdamState


# -- optimizer ------------------------------------------------------------
def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state.

    Raises:
        TrainingDiverged: if any gradient is NaN/Inf (nothing is updated)
        ValueError: if a gradient's shape differs from its parameter
    """
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, expected {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    step = state.step + 1
    new_params, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, step)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch: lr * factor^(milestones reached)."""
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return config.lr * config.lr_factor ** passed


# -- loop -----------------------------------------------------------------
def split_dataset(count: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) index split."""
    order = make_rng(seed, 0xDA7A).permutation(count)
    n_val = int(np.floor(val_fraction * count))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def pair_loss_and_grads(model: Model, pair: ShapePair, loss_config: matcher.LossConfig):
    """Forward + backward for one pair on its own tape."""
    leaves = model.leaves(requires_grad=True)
    with Tape():
        result = matcher.equishape_forward(pair.source, pair.target, leaves, model.config)
        breakdown = matcher.total_loss(result, loss_config)
    grads = backward(breakdown.objective, wrt=list(leaves.values()))
    return breakdown, {name: grads[t] for name, t in leaves.items()}


def evaluate_pairs(model: Model, pairs: Sequence[ShapePair], eps_values: Sequence[float] = (0.01, 0.05),
                   threads: int = 1) -> Dict[float, float]:
    """Mean acc(eps) over pairs with ground truth; NaN when there are none."""
    pairs = [p for p in pairs if p.gt is not None]
    if not pairs:
        return {eps: float("nan") for eps in eps_values}

    def run(pair):
        corr = matcher.predict(model, pair.source, pair.target)
        return [matcher.accuracy(corr, pair.gt, pair.target, eps) for eps in eps_values]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        scores = np.array(list(pool.map(run, pairs)))
    return {eps: float(scores[:, i].mean()) for i, eps in enumerate(eps_values)}


def _check_dataset(dataset: Sequence[ShapePair]) -> None:
    if not dataset:
        raise ValueError("training needs at least one shape pair")
    n = dataset[0].source.n
    for i, pair in enumerate(dataset):
        if pair.source.n != pair.target.n:
            raise PairMismatchError(f"pair {i}: source has {pair.source.n} points but target has {pair.target.n}")
        if pair.source.n != n:
            raise PairMismatchError(f"pair {i} has {pair.source.n} points; pair 0 has {n}")


def train(dataset: Sequence[ShapePair], config: TrainConfig, model: Optional[Model] = None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None, progress: bool = True) -> TrainResult:
    """Minimize the unsupervised objective over shape pairs with Adam.

    Per-pair losses in a batch are summed; pairs run on separate tapes across
    `config.threads` workers and their gradients are reduced in batch order, so
    runs are reproducible for a given seed.

    Raises:
        ValueError: on an empty dataset
        PairMismatchError: when pairs differ in point count
        TrainingDiverged: when a gradient turns non-finite
    """
    _check_dataset(dataset)
    model = model.copy() if model is not None else matcher.init_model(config.model)
    train_idx, val_idx = split_dataset(len(dataset), config.val_fraction, config.seed)
    if len(train_idx) == 0:
        train_idx, val_idx = np.arange(len(dataset)), np.array([], dtype=int)
    val_pairs = [dataset[i] for i in val_idx]
    state = AdamState()
    log: List[EpochLog] = []
    logger.info("Training on %d pairs (%d held out), %d parameters", len(train_idx), len(val_idx), model.num_parameters())

    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            order = make_rng(config.seed, 1, epoch).permutation(train_idx)
            batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
            totals = np.zeros(3)
            bar = tqdm(batches, desc=f"epoch {epoch + 1}/{config.epochs}", disable=not progress, leave=False)
            for batch in bar:
                results = list(pool.map(lambda i: pair_loss_and_grads(model, dataset[i], config.loss), batch))
                summed = {name: np.zeros_like(p) for name, p in model.params.items()}
                for breakdown, grads in results:
                    for name, g in grads.items():
                        summed[name] += g
                    totals += (breakdown.total, breakdown.cons, breakdown.map)
                params, state = adam_step(model.params, summed, state, lr)
                model = model.with_params(params)
                bar.set_postfix(loss=f"{np.mean([b.total for b, _ in results]):.4f}")
            means = totals / len(order)
            val = evaluate_pairs(model, val_pairs, (0.01, 0.05), config.threads)
            entry = EpochLog(epoch + 1, *means.tolist(), val[0.01], val[0.05], lr)
            log.append(entry)
            logger.info("epoch %d: loss %.5f (cons %.5f, map %.5f) val acc@0.01 %.3f acc@0.05 %.3f lr %.2e",
                        entry.epoch, entry.loss_total, entry.loss_cons, entry.loss_map,
                        entry.val_acc_001, entry.val_acc_005, lr)
            if on_epoch is not None:
                on_epoch(entry)
    return TrainResult(model, log, state)


# -- checkpoints ----------------------------------------------------------
def _write_tensors(f: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, size: int) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError("checkpoint file is truncated")
    return data


def _read_tensors(f: BinaryIO) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(f, 1))
        dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
        size = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4").reshape(dims)
        out[name] = payload.astype(np.float64)
    return out


def save_checkpoint(model: Model, path: str, optimizer: Optional[AdamState] = None) -> None:
    """Write the model (float32 weights) and optionally the Adam state, atomically."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", FORMAT_VERSION, len(config_blob)))
            f.write(config_blob)
            _write_tensors(f, model.params)
            if optimizer is None:
                f.write(struct.pack("<B", 0))
            else:
                f.write(struct.pack("<BQ", 1, optimizer.step))
                _write_tensors(f, optimizer.m)
                _write_tensors(f, optimizer.v)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_checkpoint(path: str) -> Tuple[Model, Optional[AdamState]]:
    """Load a checkpoint and its optional optimizer state.

    Raises:
        CheckpointError: bad magic, unknown version, truncated file, or
            parameter shapes that do not match the stored configuration
    """
    try:
        with open(path, "rb") as f:
            if f.read(4) != MAGIC:
                raise CheckpointError(f"{path}: not an .eqlf checkpoint (bad magic)")
            version, blob_len = struct.unpack("<II", _read_exact(f, 8))
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
            try:
                config = EquiShapeConfig.from_dict(json.loads(_read_exact(f, blob_len).decode("utf-8")))
            except (ValueError, TypeError) as exc:
                raise CheckpointError(f"{path}: invalid configuration block ({exc})")
            params = _read_tensors(f)
            optimizer = None
            flag = f.read(1)
            if flag == b"\x01":
                (step,) = struct.unpack("<Q", _read_exact(f, 8))
                optimizer = AdamState(_read_tensors(f), _read_tensors(f), step)
    except struct.error as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint ({exc})")
    expected = matcher.init_model(config).shapes()
    actual = {name: p.shape for name, p in params.items()}
    if expected != actual:
        missing = sorted(set(expected) ^ set(actual)) or [n for n in expected if expected[n] != actual.get(n)]
        raise CheckpointError(f"{path}: parameters do not match the stored configuration ({missing[:3]})")
    return Model(config, params), optimizer


def load_checkpoint(path: str, expected_config: Optional[EquiShapeConfig] = None) -> Model:
    """Load a model, optionally insisting on a specific architecture.

    Raises:
        CheckpointError: as read_checkpoint, or when the stored architecture
            differs from `expected_config`
    """
    model, _ = read_checkpoint(path)
    if expected_config is not None:
        stored, wanted = model.config.to_dict(), expected_config.to_dict()
        stored.pop("seed"), wanted.pop("seed")
        if stored != wanted:
            diff = sorted(k for k in stored if stored[k] != wanted.get(k))
            raise CheckpointError(f"{path}: checkpoint architecture differs from the requested one in {diff}")
    return model
