"""
Unit tests for the matcher module.
Tests features, similarity, constructions, losses, metrics and the full forward pass.

Run with: pytest test_matcher.py -v
"""
import numpy as np
import pytest

import matcher
from geometry import PointCloud, apply_se3, covariance_lrf, knn_graph, make_rng, random_se3, rotate_frames
from model import EquiShapeConfig
from tensor import Tape, Tensor, backward, grad_check


@pytest.fixture
def model(tiny_config):
    return matcher.init_model(tiny_config)


class TestConfig:
    """Tests for LossConfig validation."""

    def test_defaults(self):
        cfg = matcher.LossConfig.from_dict()
        assert (cfg.lambda_cc, cfg.lambda_sc, cfg.lambda_m, cfg.k_latent, cfg.alpha) == (1.0, 10.0, 1.0, 10, 0.01)

    @pytest.mark.parametrize("kwargs", [{"lambda_sc": -1.0}, {"k_latent": 0}, {"alpha": 0.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            matcher.LossConfig(**kwargs)


class TestSimilarityAndMatching:
    """Tests for cosine similarity and hard matching."""

    def test_cosine_values(self):
        S = matcher.similarity(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([[2.0, 0.0], [0.0, 3.0]]))
        np.testing.assert_allclose(S.data, [[1.0, 0.0], [np.sqrt(0.5), np.sqrt(0.5)]], atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(Exception):
            matcher.similarity(np.ones((2, 3)), np.ones((2, 4)))

    def test_ties_go_to_lowest_index(self):
        corr = matcher.hard_match(np.array([[0.5, 0.9, 0.9], [0.2, 0.1, 0.2]]))
        np.testing.assert_array_equal(corr.match, [1, 0])

    def test_margins(self):
        corr = matcher.hard_match(np.array([[0.5, 0.9, 0.7], [0.3, 0.3, 0.1]]))
        np.testing.assert_allclose(corr.margins(), [0.2, 0.0])
        np.testing.assert_allclose(corr.scores, [0.9, 0.3])

    def test_coordinate_baseline_identity(self):
        X = PointCloud(make_rng(0).standard_normal((10, 3)))
        np.testing.assert_array_equal(matcher.coordinate_nn_match(X, X).match, np.arange(10))


class TestConstruction:
    """Tests for latent neighbours and soft construction."""

    def test_exclude_self(self):
        S = np.eye(4) + 0.1 * np.arange(4.0)
        nb = matcher.latent_neighbors(S, 2, exclude_self=True)
        for i, row in enumerate(nb):
            assert i not in row

    def test_k_latent_too_large(self):
        with pytest.raises(ValueError):
            matcher.latent_neighbors(np.zeros((3, 3)), 3, exclude_self=True)

    def test_single_neighbour_copies_best_point(self):
        target = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 2, 0]])
        S = Tensor(np.array([[0.1, 0.9, 0.3], [0.8, 0.0, 0.1]]))
        out = matcher.soft_construct(S, target, 1)
        np.testing.assert_allclose(out.data, [[1.0, 0, 0], [0.0, 0, 0]])

    def test_construction_is_convex_combination(self):
        rng = make_rng(1)
        target = rng.standard_normal((8, 3))
        out = matcher.soft_construct(Tensor(rng.standard_normal((5, 8))), target, 4).data
        assert np.all(out.min(axis=0) >= target.min(axis=0) - 1e-12)
        assert np.all(out.max(axis=0) <= target.max(axis=0) + 1e-12)


class TestLosses:
    """Tests for Chamfer distance and the mapping regularizer."""

    def test_chamfer_hand_example(self):
        value = matcher.chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0], [2.0, 0, 0]]))
        assert value.item() == pytest.approx(3.5)

    def test_chamfer_zero_for_identical(self):
        pts = make_rng(2).standard_normal((6, 3))
        assert matcher.chamfer(pts, pts).item() == 0.0

    def test_chamfer_empty(self):
        with pytest.raises(ValueError):
            matcher.chamfer(np.zeros((0, 3)), np.zeros((2, 3)))

    def test_construction_loss_weights(self):
        origin, one, two = np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([[2.0, 0, 0]])
        # cross term: chamfer(X, X_c) = 2, self term: chamfer(Y, Y_s) = 8
        value = matcher.construction_loss(origin, origin, one, origin, origin, two)
        assert value.item() == pytest.approx(1.0 * 2.0 + 10.0 * 8.0)

    def test_mapping_regularizer(self):
        X = PointCloud(make_rng(3).standard_normal((8, 3)))
        graph = knn_graph(X, 3)
        constant = Tensor(np.ones((8, 3)))
        assert matcher.mapping_regularizer(X, constant, graph, 0.01).item() == 0.0
        assert matcher.mapping_regularizer(X, Tensor(X.points), graph, 10.0).item() > 0.0
        with pytest.raises(ValueError):
            matcher.mapping_regularizer(X, constant, graph, 0.0)

    def test_chamfer_gradients(self):
        rng = make_rng(4)
        report = grad_check(lambda a, b: matcher.chamfer(a, b), [rng.standard_normal((5, 3)), rng.standard_normal((4, 3))])
        assert report.passed


class TestMetrics:
    """Tests for acc(eps) and avg_error."""

    def test_perfect_prediction(self):
        target = PointCloud(make_rng(5).standard_normal((10, 3)))
        gt = np.arange(10)
        assert matcher.accuracy(gt, gt, target, 0.01) == 1.0
        assert matcher.avg_error(gt, gt, target) == 0.0

    def test_strict_threshold(self):
        target = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        # error 1.0 equals 1.0 * diameter, which does not count
        assert matcher.accuracy([1, 0], [0, 1], target, 1.0) == 0.0
        assert matcher.accuracy([0, 0], [0, 1], target, 0.5) == 0.5

    def test_against_brute_force(self):
        rng = make_rng(6)
        target = PointCloud(rng.standard_normal((20, 3)))
        pred, gt = rng.integers(0, 20, 20), rng.permutation(20)
        diam = max(np.linalg.norm(a - b) for a in target.points for b in target.points)
        errors = [np.linalg.norm(target.points[p] - target.points[g]) for p, g in zip(pred, gt)]
        assert matcher.accuracy(pred, gt, target, 0.3) == pytest.approx(np.mean([e < 0.3 * diam for e in errors]))
        assert matcher.avg_error(pred, gt, target) == pytest.approx(np.mean(errors))

    def test_eps_out_of_range(self):
        target = PointCloud(np.eye(3))
        with pytest.raises(ValueError):
            matcher.accuracy([0, 1, 2], [0, 1, 2], target, 1.5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            matcher.avg_error([0, 1], [0, 1, 2], PointCloud(np.eye(3)))


class TestFeatures:
    """Tests for the invariant feature pipeline."""

    def test_lrf_transform_is_invariant(self, model, cloud_pair):
        X, _ = cloud_pair
        params = model.leaves()
        graph = knn_graph(X, 4)
        frames = covariance_lrf(X, graph, strict=False)
        g = random_se3(6)
        h = matcher.lrf_transform(frames, X, graph, params)
        moved = matcher.lrf_transform(rotate_frames(g, frames), apply_se3(g, X), graph, params)
        assert h.shape == (14, model.config.lrf_dim)
        np.testing.assert_allclose(moved.data, h.data, atol=1e-10)

    def test_edgeconv_rows_are_unit(self, model, cloud_pair):
        h = Tensor(cloud_pair[0].points @ make_rng(7).standard_normal((3, model.config.lrf_dim)))
        F = matcher.edgeconv_extractor(h, 4, model.leaves(), model.config.edgeconv_channels)
        assert F.shape == (14, 16)
        np.testing.assert_allclose(np.linalg.norm(F.data, axis=1), np.ones(14), atol=1e-9)

    def test_edgeconv_too_few_points(self, model):
        with pytest.raises(ValueError):
            matcher.edgeconv_extractor(Tensor(np.ones((4, 8))), 4, model.leaves(), model.config.edgeconv_channels)


class TestForward:
    """Tests for the assembled pipeline."""

    def test_shapes_and_frames(self, model, cloud_pair):
        X, Y = cloud_pair
        result = matcher.equishape_forward(X, Y, model)
        assert result.similarity.shape == (14, 14)
        assert result.F_X.shape == (14, model.config.feature_dim)
        lrf_X, lrf_Y = result.lrf_sets()
        assert lrf_X.is_valid(1e-6) and lrf_Y.is_valid(1e-6)
        assert np.all(np.abs(result.similarity.data) <= 1.0 + 1e-12)

    def test_similarity_invariance(self, model, cloud_pair):
        X, Y = cloud_pair
        S = matcher.equishape_forward(X, Y, model).similarity.data
        moved = matcher.equishape_forward(apply_se3(random_se3(1), X), apply_se3(random_se3(2), Y), model)
        np.testing.assert_allclose(moved.similarity.data, S, atol=1e-5)

    def test_self_pair_is_symmetric(self, model, cloud_pair):
        X, _ = cloud_pair
        S = matcher.equishape_forward(X, X, model).similarity.data
        np.testing.assert_allclose(S, S.T, atol=1e-10)

    def test_zero_residual_changes_nothing(self, model, cloud_pair):
        X, Y = cloud_pair
        base = matcher.equishape_forward(X, Y, model).similarity.data
        zeros = [Tensor(np.zeros((14, 3))) for _ in range(4)]
        refined = matcher.equishape_forward(X, Y, model, residual=zeros).similarity.data
        np.testing.assert_array_equal(refined, base)

    def test_covariance_mode(self, tiny_config, cloud_pair):
        config = EquiShapeConfig(**{**tiny_config.to_dict(), "lrf_mode": "covariance"})
        model = matcher.init_model(config)
        assert not any(name.startswith("gvp.") for name in model.params)
        X, Y = cloud_pair
        result = matcher.equishape_forward(X, Y, model)
        expected = covariance_lrf(X, knn_graph(X, config.k), strict=False).frames
        np.testing.assert_allclose(result.lrf_X.data, expected, atol=1e-10)
        zeros = [Tensor(np.zeros((14, 3))) for _ in range(4)]
        np.testing.assert_array_equal(matcher.equishape_forward(X, Y, model, residual=zeros).similarity.data,
                                      result.similarity.data)

    def test_total_loss_breakdown(self, model, cloud_pair, tiny_loss):
        X, Y = cloud_pair
        leaves = model.leaves(requires_grad=True)
        with Tape():
            result = matcher.equishape_forward(X, Y, leaves, model.config)
            loss = matcher.total_loss(result, tiny_loss)
        assert loss.total == pytest.approx(loss.cons + loss.map)
        assert loss.cons == pytest.approx(loss.cd_cross + 10.0 * loss.cd_self)
        grads = backward(loss.objective, wrt=list(leaves.values()))
        assert all(np.all(np.isfinite(g)) for g in grads.values())
        assert set(loss.to_dict()) >= {"total", "cons", "map"}

    def test_predict_is_deterministic(self, model, cloud_pair):
        X, Y = cloud_pair
        np.testing.assert_array_equal(matcher.predict(model, X, Y).match, matcher.predict(model, X, Y).match)

    def test_init_model_seeded(self, tiny_config):
        a, b = matcher.init_model(tiny_config), matcher.init_model(tiny_config)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
