"""
From local reference frames to correspondences.

Frames turn neighbour offsets into invariant LRF-Transform features, an
EdgeConv stack turns those into per-point descriptors, cosine similarity
matches them, and soft cross/self constructions drive the unsupervised
losses. Metrics for evaluation live here too.

Feature matrices are stored one row per point (n x c).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import equinet
import tensor as T
from config import DEFAULT_CONFIG
from geometry import (KnnGraph, LrfSet, PointCloud, covariance_lrf, gram_schmidt_frames,
                      knn_graph, knn_indices, make_rng, max_diameter, pairwise_sq_distances)
from model import EquiShapeConfig, Model, Params, uniform_init
from tensor import Tensor

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
SIM_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and construction constants."""

    lambda_cc: float = 1.0
    lambda_sc: float = 10.0
    lambda_m: float = 1.0
    k_latent: int = 10
    alpha: float = 0.01

    def __post_init__(self):
        if min(self.lambda_cc, self.lambda_sc, self.lambda_m) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.k_latent < 1:
            raise ValueError("k_latent must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, object]] = None) -> "LossConfig":
        merged = dict(DEFAULT_CONFIG['loss'])
        merged.update(data or {})
        return cls(float(merged['lambda_cc']), float(merged['lambda_sc']), float(merged['lambda_m']),
                   int(merged['k_latent']), float(merged['alpha']))


@dataclass
class Correspondence:
    """Predicted target index per source point, with optional scores."""

    match: np.ndarray
    similarity: Optional[np.ndarray] = None
    construction: Optional[np.ndarray] = None

    def __post_init__(self):
        self.match = np.asarray(self.match, dtype=np.int64)

    @property
    def scores(self) -> np.ndarray:
        if self.similarity is None:
            return np.full(len(self.match), np.nan)
        return self.similarity[np.arange(len(self.match)), self.match]

    def margins(self) -> np.ndarray:
        """Gap between the best and second-best similarity of every row."""
        if self.similarity is None or self.similarity.shape[1] < 2:
            return np.full(len(self.match), np.inf)
        part = -np.partition(-self.similarity, 1, axis=1)
        return part[:, 0] - part[:, 1]


@dataclass
class LossBreakdown:
    cd_cross_x: float
    cd_cross_y: float
    cd_self_x: float
    cd_self_y: float
    map_x: float
    map_y: float
    cons: float
    map: float
    total: float
    objective: Optional[Tensor] = field(default=None, repr=False, compare=False)

    @property
    def cd_cross(self) -> float:
        return self.cd_cross_x + self.cd_cross_y

    @property
    def cd_self(self) -> float:
        return self.cd_self_x + self.cd_self_y

    @property
    def map_total(self) -> float:
        return self.map_x + self.map_y

    def to_dict(self) -> Dict[str, float]:
        return {
            'cd_cross_x': self.cd_cross_x, 'cd_cross_y': self.cd_cross_y,
            'cd_self_x': self.cd_self_x, 'cd_self_y': self.cd_self_y,
            'map_x': self.map_x, 'map_y': self.map_y,
            'cons': self.cons, 'map': self.map, 'total': self.total,
        }


@dataclass
class ForwardResult:
    X: PointCloud
    Y: PointCloud
    graph_X: KnnGraph
    graph_Y: KnnGraph
    F_X: Tensor
    F_Y: Tensor
    similarity: Tensor
    lrf_X: Tensor
    lrf_Y: Tensor
    vectors: Optional[equinet.CrossGvpOutput] = None

    def lrf_sets(self) -> Tuple[LrfSet, LrfSet]:
        return LrfSet(np.array(self.lrf_X.data)), LrfSet(np.array(self.lrf_Y.data))


# -- parameters -----------------------------------------------------------
def init_feature_params(config: EquiShapeConfig, rng: Optional[np.random.Generator] = None) -> Dict[str, np.ndarray]:
    """Weights of the LRF-Transform perceptron and the EdgeConv stack."""
    rng = rng or make_rng(config.seed, 2)
    dt = config.lrf_dim
    params = {
        "lrf.W1": uniform_init(rng, 3, dt, (3, dt)), "lrf.b1": np.zeros(dt),
        "lrf.W2": uniform_init(rng, dt, dt, (dt, dt)), "lrf.b2": np.zeros(dt),
    }
    c_in = dt
    for layer, c_out in enumerate(config.edgeconv_channels):
        params[f"edge.{layer}.W"] = uniform_init(rng, 2 * c_in, c_out, (2 * c_in, c_out))
        params[f"edge.{layer}.gamma"] = np.ones(c_out)
        params[f"edge.{layer}.beta"] = np.zeros(c_out)
        c_in = c_out
    return params


def init_model(config: Optional[EquiShapeConfig] = None) -> Model:
    """Build a freshly initialized model (deterministic per config.seed)."""
    config = config or EquiShapeConfig()
    params: Dict[str, np.ndarray] = {}
    if config.lrf_mode == "learned":
        params.update(equinet.init_params(equinet.CrossGvpConfig.from_model(config), make_rng(config.seed, 1)))
    params.update(init_feature_params(config, make_rng(config.seed, 2)))
    logger.debug("Initialized model with %d parameters", sum(p.size for p in params.values()))
    return Model(config, params)


# -- features -------------------------------------------------------------
def _cloud_points(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def lrf_transform(O: Union[Tensor, LrfSet], cloud: Union[PointCloud, np.ndarray], graph: KnnGraph,
                  params: Mapping[str, Tensor]) -> Tensor:
    """Invariant per-point features: max over neighbours of sigma(O_i^T (x_j - x_i))."""
    frames = Tensor(O.frames) if isinstance(O, LrfSet) else O
    offsets = Tensor(graph.offsets(_cloud_points(cloud)))
    local = offsets @ frames
    h = T.leaky_relu(local @ params["lrf.W1"] + params["lrf.b1"])
    h = T.leaky_relu(h @ params["lrf.W2"] + params["lrf.b2"])
    return h.max(axis=1)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes=(0, 1)) -> Tensor:
    """Per-forward (instance-style) statistics over every edge of the shape."""
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    return centered / T.sqrt(var + BN_EPS) * gamma + beta


def edgeconv_layer(h: Tensor, k: int, params: Mapping[str, Tensor], layer: int) -> Tensor:
    """EdgeConv on a kNN graph recomputed in the current feature space."""
    n, c_in = h.shape
    nb = knn_indices(h.data, k)
    W = params[f"edge.{layer}.W"]
    W_center, W_diff = W[:c_in], W[c_in:]
    # [h_i, h_j - h_i] W == h_i (W_center - W_diff) + h_j W_diff
    node_term = h @ (W_center - W_diff)
    neigh_term = h @ W_diff
    edges = T.expand_dims(node_term, 1) + T.gather(neigh_term, nb)
    edges = batch_norm(edges, params[f"edge.{layer}.gamma"], params[f"edge.{layer}.beta"])
    return T.leaky_relu(edges).max(axis=1)


def edgeconv_extractor(h: Tensor, k: int, params: Mapping[str, Tensor],
                       channels: Optional[Sequence[int]] = None) -> Tensor:
    """Stacked EdgeConv layers; returns L2-normalized n x c descriptors.

    Raises:
        ValueError: if n <= k
    """
    count = len(channels) if channels is not None else len([p for p in params if p.endswith(".gamma") and p.startswith("edge.")])
    for layer in range(count):
        h = edgeconv_layer(h, k, params, layer)
    return h / (T.l2_norm(h, axis=-1, keepdims=True) + SIM_EPS)


def similarity(F_X: Tensor, F_Y: Tensor) -> Tensor:
    """Cosine similarity s_ij = <f_i, f_j> / (|f_i||f_j| + 1e-12)."""
    F_X, F_Y = T.as_tensor(F_X), T.as_tensor(F_Y)
    if F_X.shape[-1] != F_Y.shape[-1]:
        raise T.ShapeError(f"feature widths differ: {F_X.shape} vs {F_Y.shape}")
    dots = F_X @ F_Y.T
    norms = T.l2_norm(F_X, axis=-1, keepdims=True) * T.l2_norm(F_Y, axis=-1, keepdims=True).T
    return dots / (norms + SIM_EPS)


def hard_match(S: Union[Tensor, np.ndarray]) -> Correspondence:
    """Row-wise argmax; ties go to the lowest target index."""
    data = np.array(S.data if isinstance(S, Tensor) else S, dtype=np.float64)
    return Correspondence(np.argmax(data, axis=1), similarity=data)


def coordinate_nn_match(X: PointCloud, Y: PointCloud) -> Correspondence:
    """Baseline: match every source point to its nearest target point in raw coordinates."""
    d = pairwise_sq_distances(X.points, Y.points)
    return Correspondence(np.argmin(d, axis=1), similarity=-d)


# -- construction and losses ----------------------------------------------
def latent_neighbors(S: np.ndarray, k_latent: int, exclude_self: bool = False) -> np.ndarray:
    data = np.array(S, dtype=np.float64)
    available = data.shape[1] - (1 if exclude_self else 0)
    if not 1 <= k_latent <= available:
        raise ValueError(f"k_latent={k_latent} must lie in [1, {available}]")
    if exclude_self:
        np.fill_diagonal(data, -np.inf)
    return np.argsort(-data, axis=1, kind="stable")[:, :k_latent]


def soft_construct(S: Tensor, target: Union[Tensor, PointCloud, np.ndarray], k_latent: int,
                   exclude_self: bool = False) -> Tensor:
    """Rebuild one target point per source row as a softmax-weighted mix of its
    k_latent most similar target points."""
    S = T.as_tensor(S)
    target = target if isinstance(target, Tensor) else Tensor(_cloud_points(target))
    idx = latent_neighbors(S.data, k_latent, exclude_self)
    rows = np.arange(S.shape[0])[:, None]
    weights = T.softmax(S[rows, idx], axis=1)
    return (T.expand_dims(weights, -1) * T.gather(target, idx)).sum(axis=1)


def chamfer(A: Union[Tensor, PointCloud, np.ndarray], B: Union[Tensor, PointCloud, np.ndarray]) -> Tensor:
    """Mean squared distance to the nearest point, summed over both directions."""
    A = A if isinstance(A, Tensor) else Tensor(_cloud_points(A))
    B = B if isinstance(B, Tensor) else Tensor(_cloud_points(B))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("chamfer needs non-empty clouds")
    diff = T.expand_dims(A, 1) - T.expand_dims(B, 0)
    d = (diff * diff).sum(axis=-1)
    neg = -d
    return -(neg.max(axis=1).mean()) - neg.max(axis=0).mean()


def construction_loss(X, Y, X_c, Y_c, X_s, Y_s, lambda_cc: float = 1.0, lambda_sc: float = 10.0) -> Tensor:
    return (lambda_cc * (chamfer(Y, Y_c) + chamfer(X, X_c))
            + lambda_sc * (chamfer(Y, Y_s) + chamfer(X, X_s)))


def mapping_regularizer(X: Union[PointCloud, np.ndarray], Y_c: Tensor, graph_X: KnnGraph, alpha: float) -> Tensor:
    """Neighbouring source points should map to nearby constructed points.

    Raises:
        ValueError: if alpha <= 0
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    pts = _cloud_points(X)
    nb = graph_X.neighbors
    offsets = pts[:, None, :] - pts[nb]
    weights = Tensor(np.exp(-np.sum(offsets * offsets, axis=-1) / alpha))
    Y_c = T.as_tensor(Y_c)
    diff = T.expand_dims(Y_c, 1) - T.gather(Y_c, nb)
    return ((diff * diff).sum(axis=-1) * weights).sum()


def loss_from_constructions(X: PointCloud, Y: PointCloud, X_c: Tensor, Y_c: Tensor, X_s: Tensor, Y_s: Tensor,
                            graph_X: KnnGraph, graph_Y: KnnGraph, config: LossConfig) -> LossBreakdown:
    cd_cross_x = chamfer(X, X_c)
    cd_cross_y = chamfer(Y, Y_c)
    cd_self_x = chamfer(X, X_s)
    cd_self_y = chamfer(Y, Y_s)
    map_x = mapping_regularizer(X, Y_c, graph_X, config.alpha)
    map_y = mapping_regularizer(Y, X_c, graph_Y, config.alpha)
    cons = config.lambda_cc * (cd_cross_x + cd_cross_y) + config.lambda_sc * (cd_self_x + cd_self_y)
    mapping = config.lambda_m * (map_x + map_y)
    total = cons + mapping
    return LossBreakdown(cd_cross_x.item(), cd_cross_y.item(), cd_self_x.item(), cd_self_y.item(),
                         map_x.item(), map_y.item(), cons.item(), mapping.item(), total.item(), objective=total)


def constructions(result: ForwardResult, config: LossConfig) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """(X_c, Y_c, X_s, Y_s) from a forward pass."""
    S = result.similarity
    Y_c = soft_construct(S, result.Y, config.k_latent)
    X_c = soft_construct(S.T, result.X, config.k_latent)
    X_s = soft_construct(similarity(result.F_X, result.F_X), result.X, config.k_latent, exclude_self=True)
    Y_s = soft_construct(similarity(result.F_Y, result.F_Y), result.Y, config.k_latent, exclude_self=True)
    return X_c, Y_c, X_s, Y_s


def total_loss(result: ForwardResult, config: Optional[LossConfig] = None) -> LossBreakdown:
    """Construction + mapping objective; `objective` carries the differentiable total."""
    config = config or LossConfig()
    X_c, Y_c, X_s, Y_s = constructions(result, config)
    return loss_from_constructions(result.X, result.Y, X_c, Y_c, X_s, Y_s,
                                   result.graph_X, result.graph_Y, config)


# -- metrics --------------------------------------------------------------
def _match_array(match) -> np.ndarray:
    return match.match if isinstance(match, Correspondence) else np.asarray(match, dtype=np.int64)


def _errors(match, gt, target) -> np.ndarray:
    pred = _match_array(match)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.shape[0]} rows but ground truth has {gt.shape[0]}")
    pts = _cloud_points(target)
    return np.linalg.norm(pts[pred] - pts[gt], axis=1)


def accuracy(match, gt, target, eps: float) -> float:
    """Fraction of matches within eps times the target's diameter (strict).

    Raises:
        ValueError: if eps is outside [0, 1] or lengths differ
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    errors = _errors(match, gt, target)
    return float(np.mean(errors < eps * max_diameter(target)))


def avg_error(match, gt, target) -> float:
    """Mean Euclidean distance between predicted and true target points."""
    return float(np.mean(_errors(match, gt, target)))


# -- full pipeline --------------------------------------------------------
def features_from_frames(X: PointCloud, Y: PointCloud, lrf_X: Tensor, lrf_Y: Tensor,
                         graph_X: KnnGraph, graph_Y: KnnGraph, params: Params,
                         config: EquiShapeConfig) -> Tuple[Tensor, Tensor]:
    h_X = lrf_transform(lrf_X, X, graph_X, params)
    h_Y = lrf_transform(lrf_Y, Y, graph_Y, params)
    F_X = edgeconv_extractor(h_X, config.k, params, config.edgeconv_channels)
    F_Y = edgeconv_extractor(h_Y, config.k, params, config.edgeconv_channels)
    return F_X, F_Y


def covariance_vectors(X: PointCloud, Y: PointCloud, graph_X: KnnGraph, graph_Y: KnnGraph) -> equinet.CrossGvpOutput:
    """(e1, e2) of the covariance frames; Gram-Schmidt rebuilds the same frames from them."""
    frames_X = covariance_lrf(X, graph_X, strict=False).frames
    frames_Y = covariance_lrf(Y, graph_Y, strict=False).frames
    return equinet.CrossGvpOutput(Tensor(frames_X[:, :, 0]), Tensor(frames_X[:, :, 1]),
                                  Tensor(frames_Y[:, :, 0]), Tensor(frames_Y[:, :, 1]))


def forward_from_vectors(X: PointCloud, Y: PointCloud, vectors: equinet.CrossGvpOutput,
                         graph_X: KnnGraph, graph_Y: KnnGraph, params: Params, config: EquiShapeConfig,
                         residual: Optional[Sequence[Tensor]] = None, strict_frames: bool = False) -> ForwardResult:
    """Gram-Schmidt frames from (u, v) (plus optional residuals) onward."""
    u_X, v_X, u_Y, v_Y = vectors.as_tuple()
    if residual is not None:
        du_X, dv_X, du_Y, dv_Y = residual
        u_X, v_X, u_Y, v_Y = u_X + du_X, v_X + dv_X, u_Y + du_Y, v_Y + dv_Y
    lrf_X = gram_schmidt_frames(u_X, v_X, strict=strict_frames)
    lrf_Y = gram_schmidt_frames(u_Y, v_Y, strict=strict_frames)
    F_X, F_Y = features_from_frames(X, Y, lrf_X, lrf_Y, graph_X, graph_Y, params, config)
    return ForwardResult(X, Y, graph_X, graph_Y, F_X, F_Y, similarity(F_X, F_Y), lrf_X, lrf_Y,
                         equinet.CrossGvpOutput(u_X, v_X, u_Y, v_Y, vectors.h_X, vectors.h_Y))


def equishape_forward(X: PointCloud, Y: PointCloud, params: Union[Params, Model], config: Optional[EquiShapeConfig] = None,
                      residual: Optional[Sequence[Tensor]] = None, strict_frames: bool = False) -> ForwardResult:
    """Full pipeline: Cross-GVP -> Gram-Schmidt -> LRF-Transform -> EdgeConv -> similarity.

    Args:
        X, Y: source and target clouds (n > k each)
        params: Tensor leaves (or a Model, used frozen)
        config: architecture; taken from the Model when one is passed
        residual: optional (du_X, dv_X, du_Y, dv_Y) added to the LRF vectors
        strict_frames: use the non-stabilized Gram-Schmidt that raises on
            degenerate vectors
    """
    if isinstance(params, Model):
        config = config or params.config
        params = params.leaves(requires_grad=False)
    if config is None:
        raise ValueError("equishape_forward needs a config")
    graph_X, graph_Y = knn_graph(X, config.k), knn_graph(Y, config.k)
    if config.lrf_mode == "covariance":
        vectors = covariance_vectors(X, Y, graph_X, graph_Y)
    else:
        vectors = equinet.cross_gvp(X, Y, params, equinet.CrossGvpConfig.from_model(config), (graph_X, graph_Y))
    return forward_from_vectors(X, Y, vectors, graph_X, graph_Y, params, config,
                                residual=residual, strict_frames=strict_frames)


def predict(model: Model, X: PointCloud, Y: PointCloud) -> Correspondence:
    """Frozen forward pass followed by hard matching."""
    return hard_match(equishape_forward(X, Y, model).similarity)
