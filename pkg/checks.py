"""
Executable property suites behind `equishape check`.

equivariance: Gram-Schmidt frames rotate with their inputs, Cross-GVP frame
    vectors follow each shape's own rigid motion, covariance frames rotate
    with the cloud, and the similarity matrix ignores both motions.
gradients: every differentiable op and the end-to-end objective agree with
    central finite differences.

Both run on freshly initialized small models, so a pass says something
about the architecture rather than about training.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import equinet
import matcher
import tensor as T
from geometry import (LrfSet, PointCloud, apply_se3, covariance_lrf, frame_alignment_error,
                      gram_schmidt_frames, knn_graph, make_rng, random_rotation, random_se3, rotate_frames)
from config import DEFAULT_CONFIG
from model import EquiShapeConfig

logger = logging.getLogger(__name__)

SUITES = ("equivariance", "gradients", "all")

GS_TOL = 1e-10
ORTHO_TOL = 1e-6
VECTOR_TOL = 1e-5
SIMILARITY_TOL = 1e-5
MARGIN = 1e-4
GRAD_TOL = 1e-4
CHECK_DEFAULTS = DEFAULT_CONFIG["check"]


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float
    passed: bool
    detail: str = ""


@dataclass
class SuiteReport:
    suite: str
    results: List[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{'check': r.name, 'max_error': r.max_error, 'tol': r.tol, 'passed': r.passed}
                             for r in self.results], columns=['check', 'max_error', 'tol', 'passed'])


def small_config(seed: int = 0, k: int = 6) -> EquiShapeConfig:
    return EquiShapeConfig(k=k, layers=2, dim=16, vector_dim=4, lrf_dim=16, edgeconv_channels=(16, 16, 32), seed=seed)


def _result(name: str, error: float, tol: float, detail: str = "") -> CheckResult:
    return CheckResult(name, float(error), tol, bool(error <= tol), detail)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def _random_cloud(rng: np.random.Generator, n: int) -> PointCloud:
    return PointCloud(rng.standard_normal((n, 3)))


# -- equivariance ---------------------------------------------------------
def check_gram_schmidt(seed: int, trials: int, n: int) -> List[CheckResult]:
    rng = make_rng(seed, 0x65)
    rot_err = refl_err = ortho_err = 0.0
    for _ in range(trials):
        u, v = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
        R = random_rotation(rng)
        Q = R @ np.diag([1.0, 1.0, -1.0])
        base = gram_schmidt_frames(u, v, strict=True).data
        rotated = gram_schmidt_frames(u @ R.T, v @ R.T, strict=True).data
        reflected = gram_schmidt_frames(u @ Q.T, v @ Q.T, strict=True).data
        rot_err = max(rot_err, np.max(np.abs(rotated - R @ base)))
        expected = Q @ base
        expected[:, :, 2] *= -1.0  # cross product picks up det(Q) = -1
        refl_err = max(refl_err, np.max(np.abs(reflected - expected)))
        ortho_err = max(ortho_err, LrfSet(base).max_violation())
    return [_result("gram_schmidt.rotation", rot_err, GS_TOL),
            _result("gram_schmidt.reflection", refl_err, GS_TOL),
            _result("gram_schmidt.orthonormal", ortho_err, ORTHO_TOL)]


def check_cross_gvp(seed: int, trials: int, n: int) -> List[CheckResult]:
    """Vectors of each shape follow that shape's rotation, whatever happens to the other."""
    config = small_config(seed)
    model = matcher.init_model(config)
    params = model.leaves()
    gvp_config = equinet.CrossGvpConfig.from_model(config)
    rng = make_rng(seed, 0x67)
    worst = 0.0
    for _ in range(trials):
        X, Y = _random_cloud(rng, n), _random_cloud(rng, n)
        g1, g2 = random_se3(rng), random_se3(rng)
        out = equinet.cross_gvp(X, Y, params, gvp_config)
        moved = equinet.cross_gvp(apply_se3(g1, X), apply_se3(g2, Y), params, gvp_config)
        for a, b, R in ((moved.u_X, out.u_X, g1.rotation), (moved.v_X, out.v_X, g1.rotation),
                        (moved.u_Y, out.u_Y, g2.rotation), (moved.v_Y, out.v_Y, g2.rotation)):
            worst = max(worst, _rel(a.data, b.data @ R.T))
    return [_result("cross_gvp.independent_equivariance", worst, VECTOR_TOL)]


def check_covariance_frames(seed: int, trials: int, n: int) -> List[CheckResult]:
    rng = make_rng(seed, 0x63)
    worst = 0.0
    for _ in range(trials):
        X = _random_cloud(rng, n)
        g = random_se3(rng)
        frames = covariance_lrf(X, knn_graph(X, 9), strict=False)
        moved_cloud = apply_se3(g, X)
        moved = covariance_lrf(moved_cloud, knn_graph(moved_cloud, 9), strict=False)
        worst = max(worst, frame_alignment_error(moved, rotate_frames(g, frames)))
    return [_result("covariance_lrf.equivariance", worst, VECTOR_TOL)]


def check_similarity_invariance(seed: int, trials: int, n: int) -> List[CheckResult]:
    """S(g1 X, g2 Y) == S(X, Y), and confident hard matches do not move."""
    model = matcher.init_model(small_config(seed))
    rng = make_rng(seed, 0x73)
    worst, flipped = 0.0, 0
    for _ in range(trials):
        X, Y = _random_cloud(rng, n), _random_cloud(rng, n)
        g1, g2 = random_se3(rng), random_se3(rng)
        S = matcher.equishape_forward(X, Y, model).similarity.data
        S_moved = matcher.equishape_forward(apply_se3(g1, X), apply_se3(g2, Y), model).similarity.data
        worst = max(worst, float(np.max(np.abs(S_moved - S))))
        base, moved = matcher.hard_match(S), matcher.hard_match(S_moved)
        confident = base.margins() > MARGIN
        flipped += int(np.sum(base.match[confident] != moved.match[confident]))
    return [_result("similarity.invariance", worst, SIMILARITY_TOL),
            CheckResult("hard_match.stable", float(flipped), 0.0, flipped == 0,
                        f"{flipped} confident row(s) changed")]


# -- gradients ------------------------------------------------------------
def _op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable, Sequence[np.ndarray]]]:
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    idx = np.array([[0, 2], [3, 1], [1, 1]])
    w = rng.standard_normal((4, 3, 3))
    return [
        ("add_broadcast", lambda x, y: ((x + y) * x).sum(), [a, rng.standard_normal(3)]),
        ("div", lambda x, y: (x / y).sum(), [a, rng.uniform(0.5, 2.0, (4, 3))]),
        ("power_sqrt", lambda x: (T.sqrt(x * x + 1.0) ** 3).sum(), [a]),
        ("matmul_batched", lambda x, y: (x @ y).sum(),
         [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))]),
        ("exp_sigmoid", lambda x: (T.exp(x) * T.sigmoid(x)).sum(), [a]),
        ("leaky_relu", lambda x: (T.leaky_relu(x) * x).sum(), [a]),
        ("softmax", lambda x, y: (T.softmax(x, axis=1) * y).sum(), [a, b]),
        ("max_reduce", lambda x: (x.max(axis=0) * np.arange(1.0, 4.0)).sum(), [a]),
        ("mean_reduce", lambda x: (x.mean(axis=1) ** 2).sum(), [a]),
        ("l2_norm", lambda x: T.l2_norm(x, axis=-1).sum(), [a]),
        ("cross3", lambda x, y: (T.cross3(x, y) * b).sum(), [a, rng.standard_normal((4, 3))]),
        ("gather", lambda x: (T.gather(x, idx) ** 2).sum(), [a]),
        ("concat_stack", lambda x, y: (T.stack([T.concat([x, y], axis=1), T.concat([y, x], axis=1)]) ** 2).sum(), [a, b]),
        ("gram_schmidt", lambda x, y: (gram_schmidt_frames(x, y) * w).sum(), [a, b]),
        ("chamfer", lambda x, y: matcher.chamfer(x, y), [a, rng.standard_normal((5, 3))]),
        ("batch_norm", lambda x, g, be: (matcher.batch_norm(x, g, be) ** 3).sum(),
         [rng.standard_normal((4, 2, 3)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        ("soft_construct", lambda s, y: (matcher.soft_construct(s, y, 3) ** 2).sum(),
         [rng.standard_normal((5, 6)), rng.standard_normal((6, 3))]),
    ]


def check_op_gradients(seed: int) -> List[CheckResult]:
    rng = make_rng(seed, 0x67AD)
    results = []
    for name, f, inputs in _op_cases(rng):
        report = T.grad_check(f, inputs, seed=seed)
        detail = report.reason if report.skipped else ""
        results.append(CheckResult(f"grad.{name}", 0.0 if report.skipped else report.max_rel_err,
                                   GRAD_TOL, report.passed, detail))
    return results


def check_end_to_end_gradients(seed: int, n: int = 8, max_coords: int = 3) -> List[CheckResult]:
    """total_loss against every parameter array and against refinement residuals."""
    config = small_config(seed, k=4)
    loss_config = matcher.LossConfig(k_latent=4)
    model = matcher.init_model(config)
    rng = make_rng(seed, 0xE2E)
    X, Y = _random_cloud(rng, n), _random_cloud(rng, n)
    names = sorted(model.params)

    def objective(*tensors):
        params = dict(zip(names, tensors))
        result = matcher.equishape_forward(X, Y, params, config)
        return matcher.total_loss(result, loss_config).objective

    frozen = model.leaves()
    base = matcher.equishape_forward(X, Y, frozen, config)

    def refined(*residual):
        result = matcher.forward_from_vectors(X, Y, base.vectors, base.graph_X, base.graph_Y, frozen,
                                              config, residual=residual)
        return matcher.total_loss(result, loss_config).objective

    out = []
    for label, f, inputs in (("grad.total_loss.params", objective, [model.params[k] for k in names]),
                             ("grad.total_loss.residual", refined, [0.01 * rng.standard_normal((n, 3)) for _ in range(4)])):
        report = T.grad_check(f, inputs, h=1e-6, max_coords=max_coords, seed=seed, kink_tol=1e-5)
        out.append(CheckResult(label, 0.0 if report.skipped else report.max_rel_err, GRAD_TOL,
                               report.passed, report.reason))
    return out


# -- runner ---------------------------------------------------------------
def run_suite(suite: str = "all", seed: int = 0, trials: Optional[int] = None, n: int = CHECK_DEFAULTS["points"],
              invariance_trials: Optional[int] = None) -> SuiteReport:
    """Run a named suite.

    Frame checks run `trials` random motions and the similarity check runs
    `invariance_trials`; a given `trials` also sets the latter unless it is
    passed explicitly.

    Raises:
        ValueError: on an unknown suite name
    """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    if invariance_trials is None:
        invariance_trials = trials if trials is not None else CHECK_DEFAULTS["invariance_trials"]
    if trials is None:
        trials = CHECK_DEFAULTS["equivariance_trials"]
    start = time.perf_counter()
    report = SuiteReport(suite)
    if suite in ("equivariance", "all"):
        report.results += check_gram_schmidt(seed, trials, n)
        report.results += check_cross_gvp(seed, trials, n)
        report.results += check_covariance_frames(seed, trials, n)
        report.results += check_similarity_invariance(seed, invariance_trials, n)
    if suite in ("gradients", "all"):
        report.results += check_op_gradients(seed)
        report.results += check_end_to_end_gradients(seed)
    report.seconds = time.perf_counter() - start
    for r in report.results:
        log = logger.info if r.passed else logger.error
        log("%-40s max error %.3e (tol %.0e) %s", r.name, r.max_error, r.tol, "ok" if r.passed else "FAILED")
    return report
