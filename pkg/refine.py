"""
Test-time refinement of one shape pair through a frozen model.

LRF-Refine learns residual vectors (du, dv) that are added to the Cross-GVP
frame vectors before Gram-Schmidt; only the residuals receive gradients.
The coordinate baseline instead moves the constructed points directly.
Both return the iterate with the lowest observed loss.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import matcher
import tensor as T
from config import DEFAULT_CONFIG, apply_refine_preset
from geometry import DegenerateFrame, KnnGraph, PointCloud, knn_graph
from model import Model
from tensor import Tape, Tensor, backward
from train import AdamState, adam_step

logger = logging.getLogger(__name__)

RESIDUAL_NAMES = ("du_X", "dv_X", "du_Y", "dv_Y")
STRATEGIES = ("lrf", "coord")


@dataclass(frozen=True)
class RefineConfig:
    lr: float = 1e-8
    steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    strict_frames: bool = False
    preset: str = "reference"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError(f"refine lr must be non-negative, got {self.lr}")
        if self.steps < 0:
            raise ValueError(f"refine steps must be >= 0, got {self.steps}")

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, object]] = None, preset: Optional[str] = None) -> "RefineConfig":
        merged = dict(DEFAULT_CONFIG['refine'])
        if preset is not None:
            merged = apply_refine_preset(merged, preset)
        merged.update(data or {})
        return cls(float(merged['lr']), int(merged['steps']), float(merged['beta1']), float(merged['beta2']),
                   float(merged['eps']), bool(merged['strict_frames']), str(merged.get('preset', 'reference')))


@dataclass
class ResidualLrf:
    """Residual frame vectors for both shapes, n x 3 each."""

    du_X: np.ndarray
    dv_X: np.ndarray
    du_Y: np.ndarray
    dv_Y: np.ndarray

    @classmethod
    def zeros(cls, n_x: int, n_y: int) -> "ResidualLrf":
        return cls(np.zeros((n_x, 3)), np.zeros((n_x, 3)), np.zeros((n_y, 3)), np.zeros((n_y, 3)))

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in RESIDUAL_NAMES}

    @classmethod
    def from_dict(cls, arrays: Mapping[str, np.ndarray]) -> "ResidualLrf":
        return cls(*(np.array(arrays[name], dtype=np.float64) for name in RESIDUAL_NAMES))

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(a), initial=0.0) for a in self.as_dict().values()))


@dataclass(frozen=True)
class TraceRow:
    step: int
    total: float
    cd_cross: float
    cd_self: float
    map: float

    @classmethod
    def from_breakdown(cls, step: int, b: matcher.LossBreakdown) -> "TraceRow":
        return cls(step, b.total, b.cd_cross, b.cd_self, b.map_total)


@dataclass
class RefineResult:
    """Outcome of refining one pair.

    `trace` holds the best loss seen up to each step, so it never increases;
    `observed` keeps the raw loss of every iterate.
    """

    strategy: str
    correspondence: matcher.Correspondence
    trace: List[TraceRow]
    observed: List[TraceRow]
    best_step: int
    residual: Optional[ResidualLrf] = None
    offsets: Optional[Tuple[np.ndarray, np.ndarray]] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.observed[0].total

    @property
    def best_loss(self) -> float:
        return self.observed[self.best_step].total


def _running_best(observed: Sequence[TraceRow]) -> List[TraceRow]:
    trace, best = [], None
    for row in observed:
        if best is None or row.total < best.total:
            best = row
        trace.append(TraceRow(row.step, best.total, best.cd_cross, best.cd_self, best.map))
    return trace


def lrf_refine(model: Model, X: PointCloud, Y: PointCloud, config: Optional[RefineConfig] = None,
               loss_config: Optional[matcher.LossConfig] = None) -> RefineResult:
    """Optimize residual LRF vectors for one pair with Adam; weights stay frozen.

    Step 0 evaluates zero residuals, so `steps=0` reproduces the unrefined
    pipeline exactly. Covariance-frame models refine residuals on (e1, e2)
    of their hand-crafted frames.
    """
    config = config or RefineConfig()
    loss_config = loss_config or matcher.LossConfig()
    params = model.leaves(requires_grad=False)
    base = matcher.equishape_forward(X, Y, params, model.config)
    graph_X, graph_Y, vectors = base.graph_X, base.graph_Y, base.vectors

    residual = ResidualLrf.zeros(X.n, Y.n).as_dict()
    state = AdamState()
    strict = config.strict_frames
    warnings: List[str] = []
    observed: List[TraceRow] = []
    best: Optional[Tuple[int, Dict[str, np.ndarray], matcher.Correspondence]] = None

    for step in range(config.steps + 1):
        leaves = {name: Tensor(residual[name], requires_grad=True) for name in RESIDUAL_NAMES}
        delta = [leaves[name] for name in RESIDUAL_NAMES]
        try:
            with Tape():
                result = matcher.forward_from_vectors(X, Y, vectors, graph_X, graph_Y, params, model.config,
                                                      residual=delta, strict_frames=strict)
                breakdown = matcher.total_loss(result, loss_config)
        except DegenerateFrame as exc:
            message = f"step {step}: {exc}; switched to stabilized Gram-Schmidt"
            logger.warning(message)
            warnings.append(message)
            strict = False
            with Tape():
                result = matcher.forward_from_vectors(X, Y, vectors, graph_X, graph_Y, params, model.config,
                                                      residual=delta, strict_frames=False)
                breakdown = matcher.total_loss(result, loss_config)

        observed.append(TraceRow.from_breakdown(step, breakdown))
        if best is None or breakdown.total < observed[best[0]].total:
            best = (step, {k: v.copy() for k, v in residual.items()}, matcher.hard_match(result.similarity))
        logger.debug("lrf_refine step %d: loss %.6f", step, breakdown.total)

        if step < config.steps:
            grads = backward(breakdown.objective, wrt=delta)
            residual, state = adam_step(residual, {n: grads[leaves[n]] for n in RESIDUAL_NAMES}, state,
                                        config.lr, config.beta1, config.beta2, config.eps)

    best_step, best_residual, corr = best
    logger.info("LRF-Refine: loss %.6f -> %.6f (best at step %d of %d)",
                observed[0].total, observed[best_step].total, best_step, config.steps)
    return RefineResult("lrf", corr, _running_best(observed), observed, best_step,
                        residual=ResidualLrf.from_dict(best_residual), warnings=warnings)


def _snap(points: np.ndarray, target: PointCloud) -> np.ndarray:
    """Index of the nearest target point for each row of `points`."""
    d = ((points[:, None, :] - target.points[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


def coord_refine_baseline(X: PointCloud, Y: PointCloud, F_X: T.TensorLike, F_Y: T.TensorLike,
                          config: Optional[RefineConfig] = None, loss_config: Optional[matcher.LossConfig] = None,
                          graphs: Optional[Tuple[KnnGraph, KnnGraph]] = None, k: int = 27) -> RefineResult:
    """Refine constructed coordinates directly instead of the frames.

    Per-point offsets are added to the cross-constructed clouds and optimized
    against the same objective; self-constructions stay fixed. Each source
    point is matched to the target point nearest its refined construction,
    except at step 0 where the plain similarity argmax is reported.
    """
    config = config or RefineConfig()
    loss_config = loss_config or matcher.LossConfig()
    F_X, F_Y = T.as_tensor(F_X).detach(), T.as_tensor(F_Y).detach()
    graph_X, graph_Y = graphs or (knn_graph(X, k), knn_graph(Y, k))
    S = matcher.similarity(F_X, F_Y)
    Y_c = matcher.soft_construct(S, Y, loss_config.k_latent)
    X_c = matcher.soft_construct(S.T, X, loss_config.k_latent)
    X_s = matcher.soft_construct(matcher.similarity(F_X, F_X), X, loss_config.k_latent, exclude_self=True)
    Y_s = matcher.soft_construct(matcher.similarity(F_Y, F_Y), Y, loss_config.k_latent, exclude_self=True)
    start = matcher.hard_match(S)

    offsets = {"d_X": np.zeros((X.n, 3)), "d_Y": np.zeros((Y.n, 3))}
    state = AdamState()
    observed: List[TraceRow] = []
    best: Optional[Tuple[int, Dict[str, np.ndarray]]] = None
    for step in range(config.steps + 1):
        d_X = Tensor(offsets["d_X"], requires_grad=True)
        d_Y = Tensor(offsets["d_Y"], requires_grad=True)
        with Tape():
            breakdown = matcher.loss_from_constructions(X, Y, X_c + d_X, Y_c + d_Y, X_s, Y_s,
                                                        graph_X, graph_Y, loss_config)
        observed.append(TraceRow.from_breakdown(step, breakdown))
        if best is None or breakdown.total < observed[best[0]].total:
            best = (step, {n: v.copy() for n, v in offsets.items()})
        if step < config.steps:
            grads = backward(breakdown.objective, wrt=[d_X, d_Y])
            offsets, state = adam_step(offsets, {"d_X": grads[d_X], "d_Y": grads[d_Y]}, state,
                                       config.lr, config.beta1, config.beta2, config.eps)

    best_step, best_offsets = best
    if best_step == 0:
        corr = start
    else:
        corr = matcher.Correspondence(_snap(Y_c.data + best_offsets["d_Y"], Y), S.data, Y_c.data + best_offsets["d_Y"])
    logger.info("coordinate refine: loss %.6f -> %.6f (best at step %d)",
                observed[0].total, observed[best_step].total, best_step)
    return RefineResult("coord", corr, _running_best(observed), observed, best_step,
                        offsets=(best_offsets["d_X"], best_offsets["d_Y"]))


def refine_pair(model: Model, X: PointCloud, Y: PointCloud, strategy: str = "lrf",
                config: Optional[RefineConfig] = None,
                loss_config: Optional[matcher.LossConfig] = None) -> RefineResult:
    """Run either strategy on one pair; the coordinate baseline reuses the frozen forward pass."""
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    if strategy == "lrf":
        return lrf_refine(model, X, Y, config, loss_config)
    result = matcher.equishape_forward(X, Y, model)
    return coord_refine_baseline(X, Y, result.F_X, result.F_Y, config, loss_config,
                                 graphs=(result.graph_X, result.graph_Y), k=model.config.k)


def compare_refinement(model: Model, pairs: Sequence, config: Optional[RefineConfig] = None,
                       loss_config: Optional[matcher.LossConfig] = None, eps: float = 0.05,
                       threads: int = 1) -> pd.DataFrame:
    """Score no refinement, LRF-Refine and the coordinate baseline on the same pairs.

    Returns one row per (pair, strategy) with columns
    pair, strategy, loss_initial, loss_final, acc, err. Accuracy columns are
    NaN for pairs without ground truth.
    """
    config = config or RefineConfig()

    def run(item):
        idx, pair = item
        rows = []
        base = matcher.predict(model, pair.source, pair.target)
        outcomes = [("none", base, float("nan"), float("nan"))]
        for strategy in STRATEGIES:
            res = refine_pair(model, pair.source, pair.target, strategy, config, loss_config)
            outcomes.append((strategy, res.correspondence, res.initial_loss, res.best_loss))
        for strategy, corr, loss0, loss1 in outcomes:
            if pair.gt is None:
                acc = err = float("nan")
            else:
                acc = matcher.accuracy(corr, pair.gt, pair.target, eps)
                err = matcher.avg_error(corr, pair.gt, pair.target)
            rows.append({"pair": idx, "strategy": strategy, "loss_initial": loss0,
                         "loss_final": loss1, "acc": acc, "err": err})
        return rows

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        chunks = list(pool.map(run, enumerate(pairs)))
    frame = pd.DataFrame([row for chunk in chunks for row in chunk],
                         columns=["pair", "strategy", "loss_initial", "loss_final", "acc", "err"])
    return frame


def summarize_comparison(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean accuracy, error and loss per strategy."""
    return (frame.groupby("strategy", sort=False)[["loss_initial", "loss_final", "acc", "err"]]
            .mean().reset_index())
