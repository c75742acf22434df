"""
Parameter container shared by the Cross-GVP network and the feature extractor.

Weights live as plain float64 numpy arrays keyed by dotted names
("gvp.0.msg.Ws", "edge.3.W", ...). A forward pass wraps them in Tensor
leaves; whether those leaves request gradients decides if the model is
trained or frozen for that pass.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import DEFAULT_CONFIG
from tensor import Tensor

logger = logging.getLogger(__name__)

Params = Dict[str, Tensor]

LRF_MODES = ("learned", "covariance")


@dataclass(frozen=True)
class EquiShapeConfig:
    """Architecture of the whole correspondence model."""

    k: int = 27
    layers: int = 3
    dim: int = 64
    vector_dim: int = 16
    lrf_dim: int = 64
    edgeconv_channels: Tuple[int, ...] = (64, 64, 128, 256, 512)
    cross_attention: bool = True
    lrf_mode: str = "learned"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "edgeconv_channels", tuple(int(c) for c in self.edgeconv_channels))
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.layers < 1 or self.dim < 1 or self.vector_dim < 2:
            raise ValueError("Cross-GVP needs layers >= 1, dim >= 1 and vector_dim >= 2")
        if self.lrf_dim < 1 or not self.edgeconv_channels or min(self.edgeconv_channels) < 1:
            raise ValueError("feature extractor widths must be positive")
        if self.lrf_mode not in LRF_MODES:
            raise ValueError(f"lrf_mode must be one of {LRF_MODES}, got {self.lrf_mode!r}")

    @property
    def feature_dim(self) -> int:
        return self.edgeconv_channels[-1]

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, object]] = None) -> "EquiShapeConfig":
        merged = dict(DEFAULT_CONFIG['model'])
        merged.update(data or {})
        names = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in merged.items() if k in names})

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out["edgeconv_channels"] = list(self.edgeconv_channels)
        return out


def uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Sequence[int]) -> np.ndarray:
    """Glorot-uniform draw in [-a, a], a = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


@dataclass
class Model:
    """Configuration plus named weight arrays."""

    config: EquiShapeConfig
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def leaves(self, requires_grad: bool = False, names: Optional[Iterable[str]] = None) -> Params:
        """Wrap the weights as Tensor leaves (frozen unless requires_grad)."""
        keys = self.params.keys() if names is None else names
        return {name: Tensor(self.params[name], requires_grad=requires_grad) for name in keys}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: p.shape for name, p in self.params.items()}

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Model":
        return Model(self.config, {name: np.asarray(params[name], dtype=np.float64) for name in self.params})

    def copy(self) -> "Model":
        return Model(self.config, {name: p.copy() for name, p in self.params.items()})
