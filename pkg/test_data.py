"""
Unit tests for the data module.
Tests synthetic shape generation, seeding and dataset persistence.

Run with: pytest test_data.py -v
"""
import os

import numpy as np
import pytest

import data
from data import ShapePair, ShapeSpec
from geometry import PointCloud
from storage import CloudFormatError, PairMismatchError


@pytest.fixture
def spec():
    return ShapeSpec(segment_count=3, points=64)


def pairwise(points):
    return np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)


class TestShapeSpec:
    """Tests for generator settings."""

    @pytest.mark.parametrize("kwargs", [
        {"segment_count": 0},
        {"points": 8},
        {"radius_range": (0.2, 0.1)},
        {"segment_length_range": (0.0, 1.0)},
        {"joint_angle_range": -0.1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ShapeSpec(**kwargs)

    def test_from_dict_ignores_unknown_keys(self):
        spec = ShapeSpec.from_dict({"points": 100, "seed": 4})
        assert spec.points == 100 and spec.segment_count == 5

    def test_ood_doubles_default_range(self):
        spec = ShapeSpec()
        assert spec.ood().joint_angle_range == 2 * spec.joint_angle_range


class TestGeneratePair:
    """Tests for one synthetic pair."""

    def test_rest_pose_without_motion_is_identical(self, spec):
        still = ShapeSpec(segment_count=3, points=64, joint_angle_range=0.0, global_transform=False)
        pair = data.generate_pair(still, seed=1)
        np.testing.assert_allclose(pair.target.points, pair.source.points, atol=1e-12)
        assert pair.magnitude == 0.0

    def test_identity_ground_truth(self, spec):
        pair = data.generate_pair(spec, seed=2)
        np.testing.assert_array_equal(pair.gt, np.arange(64))
        assert pair.is_bijection()

    def test_segments_move_rigidly(self, spec):
        pair = data.generate_pair(spec, seed=3)
        for s in np.unique(pair.segments):
            mask = pair.segments == s
            np.testing.assert_allclose(pairwise(pair.target.points[mask]), pairwise(pair.source.points[mask]),
                                       atol=1e-9)

    def test_shape_actually_deforms(self, spec):
        pair = data.generate_pair(spec, seed=3)
        assert not np.allclose(pairwise(pair.target.points), pairwise(pair.source.points), atol=1e-3)

    def test_normalized_source(self, spec):
        pair = data.generate_pair(spec, seed=4)
        assert np.abs(pair.source.points.mean(axis=0)).max() <= 1e-12
        assert np.linalg.norm(pair.source.points, axis=1).max() == pytest.approx(1.0)

    def test_seeded(self, spec):
        a, b = data.generate_pair(spec, 7, 3), data.generate_pair(spec, 7, 3)
        np.testing.assert_array_equal(a.source.points, b.source.points)
        np.testing.assert_array_equal(a.target.points, b.target.points)
        c = data.generate_pair(spec, 7, 4)
        assert not np.array_equal(a.source.points, c.source.points)

    def test_transform_targets(self, spec):
        pair = data.generate_pair(spec, seed=5)
        moved = data.transform_targets([pair], seed=1)[0]
        np.testing.assert_array_equal(moved.source.points, pair.source.points)
        np.testing.assert_allclose(pairwise(moved.target.points), pairwise(pair.target.points), atol=1e-9)
        np.testing.assert_allclose(moved.transform.apply_points(pair.target.points), moved.target.points)


class TestShapePair:
    """Tests for pair validation."""

    def test_size_mismatch(self):
        with pytest.raises(PairMismatchError):
            ShapePair(PointCloud(np.zeros((3, 3))), PointCloud(np.zeros((4, 3))))

    def test_gt_length(self):
        with pytest.raises(PairMismatchError):
            ShapePair(PointCloud(np.zeros((3, 3))), PointCloud(np.zeros((3, 3))), gt=[0, 1])

    def test_gt_range(self):
        with pytest.raises(ValueError):
            ShapePair(PointCloud(np.zeros((3, 3))), PointCloud(np.zeros((3, 3))), gt=[0, 1, 3])

    def test_not_a_bijection(self):
        pair = ShapePair(PointCloud(np.zeros((3, 3))), PointCloud(np.zeros((3, 3))), gt=[0, 0, 1])
        assert not pair.is_bijection()


class TestDataset:
    """Tests for writing and reading a dataset directory."""

    def test_generate_writes_files(self, spec, tmp_path):
        manifest, pairs = data.generate_dataset(spec, 3, seed=0, out_dir=str(tmp_path), threads=2)
        assert os.path.basename(manifest) == "manifest.tsv"
        assert len(os.listdir(tmp_path)) == 10
        assert [p.index for p in pairs] == [0, 1, 2]

    def test_reload_matches(self, spec, tmp_path):
        manifest, pairs = data.generate_dataset(spec, 3, seed=0, out_dir=str(tmp_path))
        loaded = data.load_dataset(manifest, threads=2)
        assert len(loaded) == 3
        for original, copy in zip(pairs, loaded):
            np.testing.assert_allclose(copy.source.points, original.source.points, atol=1e-6)
            np.testing.assert_allclose(copy.target.points, original.target.points, atol=1e-6)
            np.testing.assert_array_equal(copy.gt, original.gt)

    def test_count_must_be_positive(self, spec, tmp_path):
        with pytest.raises(ValueError):
            data.generate_dataset(spec, 0, seed=0, out_dir=str(tmp_path))

    def test_load_pair_without_gt(self, spec, tmp_path):
        src, tgt, _ = data.save_pair(data.generate_pair(spec, 0), str(tmp_path), 0)
        assert data.load_pair(src, tgt).gt is None

    def test_load_pair_size_mismatch(self, tmp_path):
        (tmp_path / "a.xyz").write_text("0 0 0\n1 0 0\n")
        (tmp_path / "b.xyz").write_text("0 0 0\n")
        with pytest.raises(PairMismatchError):
            data.load_pair(str(tmp_path / "a.xyz"), str(tmp_path / "b.xyz"))

    def test_load_pair_bad_line(self, tmp_path):
        (tmp_path / "a.xyz").write_text("0 0 0\n1 x 0\n")
        (tmp_path / "b.xyz").write_text("0 0 0\n1 0 0\n")
        with pytest.raises(CloudFormatError, match=":2:"):
            data.load_pair(str(tmp_path / "a.xyz"), str(tmp_path / "b.xyz"))
