"""
Point-cloud primitives: rigid transforms, exact kNN graphs, Gram-Schmidt
frame assembly and a covariance-based hand-crafted local reference frame.

Every random draw in the repository goes through make_rng(), which uses
numpy's Philox generator (a 64-bit counter-based RNG) so seeds are portable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

import tensor as T
from tensor import Tensor

logger = logging.getLogger(__name__)

GS_EPS = 1e-8
EIGEN_GAP = 1e-10


class DegenerateFrame(ValueError):
    """Raised when a local frame cannot be determined uniquely."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox-backed generator for (seed, *stream)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class PointCloud:
    """n x 3 coordinates in model units."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"PointCloud needs an n x 3 array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("PointCloud coordinates must be finite.")
        pts = pts.view()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class Se3Transform:
    """Rigid motion p -> R p + t with R in SO(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-10) or abs(np.linalg.det(rot) - 1.0) > 1e-10:
            raise ValueError("Se3Transform rotation must be orthogonal with det +1.")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Se3Transform":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, first: "Se3Transform") -> "Se3Transform":
        """Return self o first (apply `first`, then self)."""
        return Se3Transform(self.rotation @ first.rotation,
                            self.rotation @ first.translation + self.translation)

    def inverse(self) -> "Se3Transform":
        return Se3Transform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class KnnGraph:
    """Directed kNN topology: neighbors[i] lists i's k nearest nodes, nearest first."""

    k: int
    neighbors: np.ndarray

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    def offsets(self, points: np.ndarray) -> np.ndarray:
        """x_j - x_i for every edge, shaped n x k x 3."""
        points = np.asarray(points)
        return points[self.neighbors] - points[:, None, :]


@dataclass(frozen=True)
class LrfSet:
    """Per-point frames, frame i = [e1 e2 e3] stacked as columns."""

    frames: np.ndarray

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    def max_violation(self) -> float:
        """Largest deviation from orthonormality, det +1 and e3 = e1 x e2."""
        f = self.frames
        ortho = np.abs(np.swapaxes(f, 1, 2) @ f - np.eye(3)).max(initial=0.0)
        det = np.abs(np.linalg.det(f) - 1.0).max(initial=0.0)
        hand = np.abs(np.cross(f[:, :, 0], f[:, :, 1]) - f[:, :, 2]).max(initial=0.0)
        return float(max(ortho, det, hand))

    def is_valid(self, tol: float = 1e-6) -> bool:
        return self.max_violation() <= tol


CloudLike = Union[PointCloud, np.ndarray]


def _points(cloud: CloudLike) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def pairwise_sq_distances(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact squared distances by explicit differences, row-chunked."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    for start in range(0, a.shape[0], chunk):
        diff = a[start:start + chunk, None, :] - b[None, :, :]
        out[start:start + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def knn_indices(features: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbours of every row (self excluded), ties to lower index.

    Works for any feature dimension, so the EdgeConv extractor reuses it in
    feature space.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    d = pairwise_sq_distances(features, features)
    np.fill_diagonal(d, np.inf)
    # stable sort keeps equal distances in index order
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def knn_graph(cloud: CloudLike, k: int) -> KnnGraph:
    """Build the exact Euclidean kNN graph of a cloud.

    Raises:
        ValueError: if k is not in [1, n)
    """
    return KnnGraph(int(k), knn_indices(_points(cloud), k))


def apply_se3(g: Se3Transform, cloud: PointCloud) -> PointCloud:
    return PointCloud(g.apply_points(cloud.points))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-8:
        q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    # re-orthonormalize away rounding so the 1e-10 invariants hold
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def random_se3(seed: Union[int, np.random.Generator]) -> Se3Transform:
    """Uniform rotation over SO(3) plus a translation uniform in [-1, 1]^3."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    rot = random_rotation(rng)
    return Se3Transform(rot, rng.uniform(-1.0, 1.0, size=3))


def center(cloud: PointCloud) -> Tuple[PointCloud, np.ndarray]:
    """Return the centered cloud and its centroid."""
    if cloud.n < 1:
        raise ValueError("center() needs at least one point")
    centroid = cloud.points.mean(axis=0)
    return PointCloud(cloud.points - centroid), centroid


def normalize_unit_radius(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Center points and scale them so the farthest point sits at radius 1.

    Returns:
        (normalized points, centroid, scale) with normalized = (points - centroid) * scale
    """
    points = np.asarray(points, dtype=np.float64)
    centroid = points.mean(axis=0)
    radius = np.max(np.linalg.norm(points - centroid, axis=1))
    scale = 1.0 / radius if radius > 0 else 1.0
    return (points - centroid) * scale, centroid, scale


def gram_schmidt(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Strict Gram-Schmidt frame [e1 e2 e3] from two vectors.

    Raises:
        DegenerateFrame: if |u| < 1e-8 or v is (nearly) parallel to u
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu < GS_EPS:
        raise DegenerateFrame(f"first frame vector has norm {nu:.3g} < {GS_EPS}")
    e1 = u / nu
    w = v - np.dot(v, e1) * e1
    nw = np.linalg.norm(w)
    if nw < GS_EPS:
        raise DegenerateFrame(f"second frame vector is parallel to the first (rejection norm {nw:.3g})")
    e2 = w / nw
    return np.stack([e1, e2, np.cross(e1, e2)], axis=1)


def frames_degenerate(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean mask of rows where strict Gram-Schmidt would fail."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1)
    e1 = u / np.maximum(nu, GS_EPS)[..., None]
    w = v - np.sum(v * e1, axis=-1, keepdims=True) * e1
    return (nu < GS_EPS) | (np.linalg.norm(w, axis=-1) < GS_EPS)


def _floored(norm: Tensor, eps: float) -> Tensor:
    # value max(norm, eps); the lift below the floor is a constant
    return norm + Tensor(np.maximum(eps - norm.data, 0.0))


def gram_schmidt_frames(u: T.TensorLike, v: T.TensorLike, strict: bool = False) -> Tensor:
    """Differentiable row-wise Gram-Schmidt: (n x 3, n x 3) -> n x 3 x 3 frames.

    The stabilized variant floors both norms at GS_EPS and never fails, so
    rows with norms above the floor come out exactly orthonormal. The strict
    variant divides by the exact norms and raises on degenerate rows.
    """
    u, v = T.as_tensor(u), T.as_tensor(v)
    if strict:
        bad = frames_degenerate(u.data, v.data)
        if np.any(bad):
            raise DegenerateFrame(f"{int(bad.sum())} degenerate frame(s) at rows {np.flatnonzero(bad)[:5].tolist()}")
        eps = 0.0
    else:
        eps = GS_EPS
    e1 = u / _floored(T.l2_norm(u, axis=-1, keepdims=True), eps)
    w = v - (v * e1).sum(axis=-1, keepdims=True) * e1
    e2 = w / _floored(T.l2_norm(w, axis=-1, keepdims=True), eps)
    e3 = T.cross3(e1, e2)
    return T.stack([e1, e2, e3], axis=-1)


def covariance_lrf(cloud: PointCloud, graph: KnnGraph, strict: bool = True) -> LrfSet:
    """Hand-crafted frames from the covariance of neighbour offsets.

    Axes follow eigenvectors by descending eigenvalue. e1 and e3 are flipped
    toward the majority of neighbour offsets (ties keep the solver's sign) and
    e2 = e3 x e1 completes a right-handed frame.

    Raises:
        DegenerateFrame: (strict only) when the two smallest eigenvalues differ
            by less than 1e-10
    """
    if graph.n != cloud.n:
        raise ValueError(f"graph has {graph.n} nodes but the cloud has {cloud.n} points")
    offsets = graph.offsets(cloud.points)
    cov = np.einsum("nki,nkj->nij", offsets, offsets) / graph.k
    evals, evecs = np.linalg.eigh(cov)
    ambiguous = (evals[:, 1] - evals[:, 0]) < EIGEN_GAP
    if np.any(ambiguous):
        if strict:
            raise DegenerateFrame(f"{int(ambiguous.sum())} point(s) have ambiguous covariance axes")
        logger.warning("covariance_lrf: %d point(s) with ambiguous axes", int(ambiguous.sum()))

    def disambiguate(axis: np.ndarray) -> np.ndarray:
        dots = np.einsum("nki,ni->nk", offsets, axis)
        pos = np.sum(dots > 0, axis=1)
        neg = np.sum(dots < 0, axis=1)
        return np.where((pos < neg)[:, None], -axis, axis)

    e1 = disambiguate(evecs[:, :, 2])
    e3 = disambiguate(evecs[:, :, 0])
    e2 = np.cross(e3, e1)
    return LrfSet(np.stack([e1, e2, e3], axis=2))


def frame_alignment_error(a: LrfSet, b: LrfSet) -> float:
    """Max entrywise difference between two frame sets."""
    return float(np.max(np.abs(a.frames - b.frames), initial=0.0))


def rotate_frames(g: Se3Transform, lrf: LrfSet) -> LrfSet:
    return LrfSet(np.einsum("ij,njk->nik", g.rotation, lrf.frames))


def max_diameter(cloud: CloudLike) -> float:
    """Largest pairwise distance in a cloud.

    Raises:
        ValueError: with fewer than two points
    """
    pts = _points(cloud)
    if pts.shape[0] < 2:
        raise ValueError("max_diameter needs at least two points")
    return float(np.sqrt(pairwise_sq_distances(pts, pts).max()))
