"""
Synthetic articulated shape pairs with exact ground truth.

A shape is a tree of capsules. Every surface point keeps a fixed
parameterization (segment, angle, height) so the source and the re-posed
target share point order and the ground truth is the identity. Re-posing
rotates each segment rigidly about its joint, which keeps every segment
rigid while the whole shape deforms.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import DEFAULT_CONFIG
from geometry import PointCloud, Se3Transform, make_rng, normalize_unit_radius, random_se3
from storage import (MANIFEST_NAME, PairMismatchError, read_gt, read_manifest, read_xyz,
                     write_gt, write_manifest, write_xyz)

logger = logging.getLogger(__name__)

MIN_POINTS = 32


@dataclass(frozen=True)
class ShapeSpec:
    segment_count: int = 5
    points: int = 256
    joint_angle_range: float = 0.6
    segment_length_range: Tuple[float, float] = (0.5, 1.0)
    radius_range: Tuple[float, float] = (0.08, 0.2)
    global_transform: bool = True
    normalize: bool = True
    ood_joint_angle_range: float = 1.2

    def __post_init__(self):
        object.__setattr__(self, "segment_length_range", tuple(float(v) for v in self.segment_length_range))
        object.__setattr__(self, "radius_range", tuple(float(v) for v in self.radius_range))
        self.validate()

    def validate(self) -> None:
        if self.segment_count < 1:
            raise ValueError("segment_count must be >= 1")
        if self.points < MIN_POINTS:
            raise ValueError(f"shapes need at least {MIN_POINTS} points, got {self.points}")
        lo, hi = self.radius_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"radius range must be positive and ordered, got {self.radius_range}")
        lo, hi = self.segment_length_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"segment length range must be positive and ordered, got {self.segment_length_range}")
        if self.joint_angle_range < 0:
            raise ValueError("joint_angle_range must be non-negative")

    @classmethod
    def from_dict(cls, data=None) -> "ShapeSpec":
        merged = dict(DEFAULT_CONFIG['data'])
        merged.update(data or {})
        names = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in merged.items() if k in names})

    def ood(self) -> "ShapeSpec":
        """Same shapes, re-posed with the wider out-of-distribution joint range."""
        return replace(self, joint_angle_range=self.ood_joint_angle_range)


@dataclass
class ShapePair:
    source: PointCloud
    target: PointCloud
    gt: Optional[np.ndarray] = None
    seed: Optional[int] = None
    index: int = 0
    magnitude: float = 0.0
    transform: Optional[Se3Transform] = None
    segments: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.source.n != self.target.n:
            raise PairMismatchError(f"source has {self.source.n} points but target has {self.target.n}")
        if self.gt is not None:
            self.gt = np.asarray(self.gt, dtype=np.int64)
            if self.gt.shape != (self.source.n,):
                raise PairMismatchError(f"ground truth has {self.gt.shape[0]} entries for {self.source.n} points")
            if self.gt.size and (self.gt.min() < 0 or self.gt.max() >= self.target.n):
                raise ValueError("ground-truth index out of range")

    @property
    def n(self) -> int:
        return self.source.n

    def is_bijection(self) -> bool:
        return self.gt is not None and np.array_equal(np.sort(self.gt), np.arange(self.n))


@dataclass(frozen=True)
class Skeleton:
    parents: np.ndarray  # -1 for the root
    starts: np.ndarray   # S x 3 joint positions
    axes: np.ndarray     # S x 3 unit directions
    lengths: np.ndarray
    radii: np.ndarray


def _rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _perpendicular_basis(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(axis, helper)
    a /= np.linalg.norm(a)
    return a, np.cross(axis, a)


def build_skeleton(spec: ShapeSpec, rng: np.random.Generator) -> Skeleton:
    """Random tree: segment s hangs off the end of a random earlier segment."""
    S = spec.segment_count
    parents = np.full(S, -1)
    starts, axes = np.zeros((S, 3)), np.zeros((S, 3))
    lengths = rng.uniform(*spec.segment_length_range, size=S)
    radii = rng.uniform(*spec.radius_range, size=S)
    axes[0] = _unit(rng)
    for s in range(1, S):
        p = int(rng.integers(0, s))
        parents[s] = p
        starts[s] = starts[p] + lengths[p] * axes[p]
        axes[s] = _unit(rng)
    return Skeleton(parents, starts, axes, lengths, radii)


def sample_surface(skeleton: Skeleton, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Sample capsule surface points; returns (points, segment id per point)."""
    areas = 2 * np.pi * skeleton.radii * skeleton.lengths + 4 * np.pi * skeleton.radii ** 2
    segments = np.sort(rng.choice(len(areas), size=n, p=areas / areas.sum()))
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    r, L = skeleton.radii[segments], skeleton.lengths[segments]
    height = rng.uniform(-r, L + r)
    overshoot = height - np.clip(height, 0.0, L)
    radial = np.sqrt(np.maximum(r ** 2 - overshoot ** 2, 0.0))
    points = np.zeros((n, 3))
    for s in range(len(areas)):
        mask = segments == s
        a, b = _perpendicular_basis(skeleton.axes[s])
        ring = np.cos(theta[mask])[:, None] * a + np.sin(theta[mask])[:, None] * b
        points[mask] = skeleton.starts[s] + height[mask, None] * skeleton.axes[s] + radial[mask, None] * ring
    return points, segments


def pose_transforms(skeleton: Skeleton, angle_range: float, rng: np.random.Generator) -> Tuple[List[Se3Transform], float]:
    """World transform per segment: its own joint rotation after its parent's motion."""
    transforms: List[Se3Transform] = []
    magnitude = 0.0
    for s in range(len(skeleton.parents)):
        angle = rng.uniform(-angle_range, angle_range) if angle_range > 0 else 0.0
        magnitude = max(magnitude, abs(angle))
        R = _rodrigues(_unit(rng), angle)
        joint = skeleton.starts[s]
        local = Se3Transform(R, joint - R @ joint)
        parent = skeleton.parents[s]
        transforms.append(local if parent < 0 else transforms[parent].compose(local))
    return transforms, magnitude


def generate_pair(spec: ShapeSpec, seed: int, index: int = 0) -> ShapePair:
    """Build one source/target pair; the same (seed, index) always gives the same pair."""
    rng = make_rng(seed, index)
    skeleton = build_skeleton(spec, rng)
    source, segments = sample_surface(skeleton, spec.points, rng)
    transforms, magnitude = pose_transforms(skeleton, spec.joint_angle_range, rng)
    target = np.empty_like(source)
    for s, g in enumerate(transforms):
        mask = segments == s
        target[mask] = g.apply_points(source[mask])
    transform = random_se3(rng) if spec.global_transform else Se3Transform.identity()
    target = transform.apply_points(target)
    if spec.normalize:
        source, _, scale = normalize_unit_radius(source)
        target = (target - target.mean(axis=0)) * scale
    return ShapePair(PointCloud(source), PointCloud(target), np.arange(spec.points), seed, index,
                     magnitude, transform, segments)


def pair_paths(out_dir: str, index: int) -> Tuple[str, str, str]:
    stem = os.path.join(out_dir, f"pair_{index:05d}")
    return f"{stem}_src.xyz", f"{stem}_tgt.xyz", f"{stem}_gt.txt"


def save_pair(pair: ShapePair, out_dir: str, index: int) -> Tuple[str, str, Optional[str]]:
    src, tgt, gt = pair_paths(out_dir, index)
    write_xyz(pair.source, src)
    write_xyz(pair.target, tgt)
    if pair.gt is None:
        return src, tgt, None
    write_gt(pair.gt, gt)
    return src, tgt, gt


def generate_dataset(spec: ShapeSpec, count: int, seed: int, out_dir: str,
                     threads: int = 1) -> Tuple[str, List[ShapePair]]:
    """
    Generate and write `count` pairs plus a manifest.

    Returns:
        (manifest path, pairs in index order)

    Raises:
        ValueError: If count < 1
        IOError: If the directory cannot be written
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)

    def make(index):
        pair = generate_pair(spec, seed, index)
        return pair, save_pair(pair, out_dir, index)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(make, range(count)))
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    write_manifest([paths for _, paths in results], manifest)
    logger.info("Wrote %d pairs (%d points each) to %s", count, spec.points, out_dir)
    return manifest, [pair for pair, _ in results]


def load_pair(src_path: str, tgt_path: str, gt_path: Optional[str] = None) -> ShapePair:
    """
    Load a pair from text files; ground truth is optional.

    Raises:
        CloudFormatError: on a malformed line (the message names it)
        PairMismatchError: If the files disagree on the point count
    """
    source, target = read_xyz(src_path), read_xyz(tgt_path)
    if source.n != target.n:
        raise PairMismatchError(f"{src_path} has {source.n} points but {tgt_path} has {target.n}")
    gt = read_gt(gt_path, target.n) if gt_path else None
    return ShapePair(source, target, gt)


def load_dataset(manifest: str, threads: int = 1) -> List[ShapePair]:
    rows = read_manifest(manifest)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        pairs = list(pool.map(lambda row: load_pair(*row), rows))
    for i, pair in enumerate(pairs):
        pair.index = i
    logger.info("Loaded %d pairs from %s", len(pairs), manifest)
    return pairs


def transform_targets(pairs: Sequence[ShapePair], seed: int) -> List[ShapePair]:
    """Copies of the pairs with an independent random rigid motion applied to each target."""
    out = []
    for i, pair in enumerate(pairs):
        g = random_se3(make_rng(seed, 0x5E3, i))
        out.append(ShapePair(pair.source, PointCloud(g.apply_points(pair.target.points)), pair.gt,
                             pair.seed, pair.index, pair.magnitude, g, pair.segments))
    return out
