"""
Cross-GVP network: per-shape geometric vector perceptron graph convolutions
with cross-attention over invariant scalar channels between the two shapes.

Scalars (h) stay invariant and vectors (Z) stay rotation-equivariant because
vector channels are only mixed linearly across channels and gated by
invariant scalars. Only scalars cross between shapes, so each shape's output
vectors follow that shape's own rigid motion and ignore the other's.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

import tensor as T
from geometry import KnnGraph, PointCloud, knn_graph, make_rng
from model import EquiShapeConfig, Params, uniform_init
from tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CrossGvpConfig:
    layers: int = 3
    dim: int = 64
    vector_dim: int = 16
    k: int = 27
    seed: int = 0
    cross_attention: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1 or self.vector_dim < 2:
            raise ValueError("CrossGvpConfig needs layers >= 1, dim >= 1, vector_dim >= 2")

    @classmethod
    def from_model(cls, config: EquiShapeConfig) -> "CrossGvpConfig":
        return cls(config.layers, config.dim, config.vector_dim, config.k, config.seed, config.cross_attention)


@dataclass
class NodeState:
    h: Tensor  # n x d
    Z: Tensor  # n x channels x 3


@dataclass(frozen=True)
class EdgeFeature:
    h: np.ndarray  # n x k x 1 distances
    Z: np.ndarray  # n x k x 1 x 3 offsets x_i - x_j


@dataclass
class CrossGvpOutput:
    u_X: Tensor
    v_X: Tensor
    u_Y: Tensor
    v_Y: Tensor
    h_X: Optional[Tensor] = None
    h_Y: Optional[Tensor] = None

    def as_tuple(self) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.u_X, self.v_X, self.u_Y, self.v_Y


# -- parameters -----------------------------------------------------------
def _gvp_params(rng, prefix: str, s_in: int, v_in: int, s_out: int, v_out: int) -> Dict[str, np.ndarray]:
    hidden = max(v_in, v_out)
    return {
        prefix + "Wh": uniform_init(rng, v_in, hidden, (hidden, v_in)),
        prefix + "Ws": uniform_init(rng, s_in + hidden, s_out, (s_in + hidden, s_out)),
        prefix + "bs": np.zeros(s_out),
        prefix + "Wmu": uniform_init(rng, hidden, v_out, (v_out, hidden)),
        prefix + "Wg": uniform_init(rng, s_out, v_out, (s_out, v_out)),
        prefix + "bg": np.zeros(v_out),
    }


def _mlp_params(rng, prefix: str, d: int) -> Dict[str, np.ndarray]:
    return {
        prefix + "W1": uniform_init(rng, d, d, (d, d)), prefix + "b1": np.zeros(d),
        prefix + "W2": uniform_init(rng, d, d, (d, d)), prefix + "b2": np.zeros(d),
    }


def init_params(config: CrossGvpConfig, rng: Optional[np.random.Generator] = None) -> Dict[str, np.ndarray]:
    """Seeded weights for every GVP-G layer, attention block and the output head."""
    rng = rng or make_rng(config.seed, 1)
    d, nu = config.dim, config.vector_dim
    params: Dict[str, np.ndarray] = {}
    for layer in range(config.layers):
        v_node = 1 if layer == 0 else nu
        params.update(_gvp_params(rng, f"gvp.{layer}.msg.", 2 * d + 1, 2 * v_node + 1, d, nu))
        params.update(_gvp_params(rng, f"gvp.{layer}.node.", d, nu, d, nu))
        if v_node != nu:
            params[f"gvp.{layer}.skip"] = uniform_init(rng, v_node, nu, (nu, v_node))
        if config.cross_attention:
            params[f"cross.{layer}.W"] = uniform_init(rng, d, d, (d, d))
            params.update(_mlp_params(rng, f"cross.{layer}.q.", d))
            params.update(_mlp_params(rng, f"cross.{layer}.k.", d))
            params[f"cross.{layer}.P"] = uniform_init(rng, 2 * d, d, (2 * d, d))
            params[f"cross.{layer}.bP"] = np.zeros(d)
    params.update(_gvp_params(rng, "gvp.head.", d, nu, d, 2))
    return params


# -- layers ---------------------------------------------------------------
def init_states(cloud: PointCloud, dim: int) -> NodeState:
    """h0 = 0 and a single vector channel holding x_i minus the centroid."""
    pts = cloud.points
    z0 = (pts - pts.mean(axis=0))[:, None, :]
    return NodeState(Tensor(np.zeros((cloud.n, dim))), Tensor(z0))


def edge_features(cloud: PointCloud, graph: KnnGraph) -> EdgeFeature:
    offsets = cloud.points[:, None, :] - cloud.points[graph.neighbors]
    dist = np.linalg.norm(offsets, axis=-1, keepdims=True)
    return EdgeFeature(dist, offsets[:, :, None, :])


def gvp(h: Tensor, Z: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tuple[Tensor, Tensor]:
    """Geometric vector perceptron.

    Args:
        h: (..., s_in) invariant scalars
        Z: (..., v_in, 3) equivariant vectors
        params: weights under `prefix` (Wh, Ws, bs, Wmu, Wg, bg)

    Returns:
        (h', Z') with h' (..., s_out) and Z' (..., v_out, 3)
    """
    Vh = params[prefix + "Wh"] @ Z
    norms = T.l2_norm(Vh, axis=-1)
    s = T.leaky_relu(T.concat([h, norms], axis=-1) @ params[prefix + "Ws"] + params[prefix + "bs"])
    Vmu = params[prefix + "Wmu"] @ Vh
    gate = T.sigmoid(s @ params[prefix + "Wg"] + params[prefix + "bg"])
    return s, T.expand_dims(gate, -1) * Vmu


def gvp_g_layer(state: NodeState, graph: KnnGraph, edges: EdgeFeature,
                params: Mapping[str, Tensor], layer: int) -> NodeState:
    """One message-passing round: mean of edge GVP messages, residual, node GVP."""
    n, k = graph.neighbors.shape
    h, Z = state.h, state.Z
    d, v = h.shape[-1], Z.shape[-2]
    nb = graph.neighbors
    s_in = T.concat([
        T.broadcast_to(T.expand_dims(h, 1), (n, k, d)),
        T.gather(h, nb),
        Tensor(edges.h),
    ], axis=-1)
    v_in = T.concat([
        T.broadcast_to(T.expand_dims(Z, 1), (n, k, v, 3)),
        T.gather(Z, nb),
        Tensor(edges.Z),
    ], axis=-2)
    ms, mv = gvp(s_in, v_in, params, f"gvp.{layer}.msg.")
    skip = params.get(f"gvp.{layer}.skip")
    Z_base = Z if skip is None else skip @ Z
    h = h + ms.mean(axis=1)
    Z = Z_base + mv.mean(axis=1)
    us, uv = gvp(h, Z, params, f"gvp.{layer}.node.")
    return NodeState(h + us, Z + uv)


def _mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    hidden = T.leaky_relu(x @ params[prefix + "W1"] + params[prefix + "b1"])
    return hidden @ params[prefix + "W2"] + params[prefix + "b2"]


def attention_weights(h_query: Tensor, h_key: Tensor, params: Mapping[str, Tensor], layer: int) -> Tensor:
    q = _mlp(h_query, params, f"cross.{layer}.q.")
    key = _mlp(h_key, params, f"cross.{layer}.k.")
    return T.softmax(q @ key.T, axis=1)


def cross_attention(h_X: Tensor, h_Y: Tensor, params: Mapping[str, Tensor], layer: int) -> Tuple[Tensor, Tensor]:
    """Each point attends over all points of the other shape's invariant scalars."""
    W = params[f"cross.{layer}.W"]
    mu_X = attention_weights(h_X, h_Y, params, layer) @ (h_Y @ W)
    mu_Y = attention_weights(h_Y, h_X, params, layer) @ (h_X @ W)
    return mu_X, mu_Y


def fuse(h: Tensor, mu: Tensor, params: Mapping[str, Tensor], layer: int) -> Tensor:
    """Concatenate [h, mu] and project 2d -> d."""
    return T.leaky_relu(T.concat([h, mu], axis=-1) @ params[f"cross.{layer}.P"] + params[f"cross.{layer}.bP"])


def cross_gvp(X: PointCloud, Y: PointCloud, params: Params, config: CrossGvpConfig,
              graphs: Optional[Tuple[KnnGraph, KnnGraph]] = None) -> CrossGvpOutput:
    """Pair-wise independent SE(3)-equivariant LRF vectors (u, v) for both shapes.

    Raises:
        ValueError: if either cloud has n <= k
    """
    graph_X, graph_Y = graphs or (knn_graph(X, config.k), knn_graph(Y, config.k))
    edges_X, edges_Y = edge_features(X, graph_X), edge_features(Y, graph_Y)
    sX, sY = init_states(X, config.dim), init_states(Y, config.dim)
    for layer in range(config.layers):
        sX = gvp_g_layer(sX, graph_X, edges_X, params, layer)
        sY = gvp_g_layer(sY, graph_Y, edges_Y, params, layer)
        if config.cross_attention:
            mu_X, mu_Y = cross_attention(sX.h, sY.h, params, layer)
            sX = NodeState(fuse(sX.h, mu_X, params, layer), sX.Z)
            sY = NodeState(fuse(sY.h, mu_Y, params, layer), sY.Z)
    _, out_X = gvp(sX.h, sX.Z, params, "gvp.head.")
    _, out_Y = gvp(sY.h, sY.Z, params, "gvp.head.")
    return CrossGvpOutput(out_X[:, 0, :], out_X[:, 1, :], out_Y[:, 0, :], out_Y[:, 1, :], sX.h, sY.h)
