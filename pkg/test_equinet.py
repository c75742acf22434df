"""
Unit tests for the equinet module (Cross-GVP).

Run with: pytest test_equinet.py -v
"""
import numpy as np
import pytest

import equinet
from geometry import PointCloud, apply_se3, knn_graph, make_rng, random_se3
from tensor import Tape, Tensor, backward, grad_check


@pytest.fixture
def gvp_config(tiny_config):
    return equinet.CrossGvpConfig.from_model(tiny_config)


@pytest.fixture
def params(gvp_config):
    return {name: Tensor(p) for name, p in equinet.init_params(gvp_config).items()}


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestParameters:
    """Tests for weight initialization."""

    def test_seeded(self, gvp_config):
        a, b = equinet.init_params(gvp_config), equinet.init_params(gvp_config)
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_layer_shapes(self, gvp_config):
        p = equinet.init_params(gvp_config)
        d, nu = gvp_config.dim, gvp_config.vector_dim
        assert p["gvp.0.msg.Wh"].shape == (nu, 3)           # v_in = 2*1 + 1 on the first layer
        assert p["gvp.1.msg.Wh"].shape == (2 * nu + 1, 2 * nu + 1)
        assert p["gvp.0.msg.Ws"].shape == (2 * d + 1 + nu, d)
        assert p["gvp.0.skip"].shape == (nu, 1)
        assert "gvp.1.skip" not in p
        assert p["gvp.head.Wmu"].shape == (2, nu)
        assert p["cross.0.P"].shape == (2 * d, d)

    def test_no_cross_attention_params(self, tiny_config):
        config = equinet.CrossGvpConfig(layers=2, dim=8, vector_dim=4, k=4, cross_attention=False)
        assert not any(name.startswith("cross.") for name in equinet.init_params(config))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            equinet.CrossGvpConfig(vector_dim=1)


class TestInitialStates:
    """Tests for layer-0 node states."""

    def test_two_points(self):
        state = equinet.init_states(PointCloud(np.array([[1.0, 0, 0], [-1.0, 0, 0]])), dim=8)
        np.testing.assert_array_equal(state.h.data, np.zeros((2, 8)))
        np.testing.assert_array_equal(state.Z.data[:, 0, :], [[1.0, 0, 0], [-1.0, 0, 0]])

    def test_translation_and_rotation(self):
        cloud = PointCloud(make_rng(1).standard_normal((6, 3)))
        g = random_se3(2)
        base = equinet.init_states(cloud, dim=4).Z.data[:, 0, :]
        moved = equinet.init_states(apply_se3(g, cloud), dim=4).Z.data[:, 0, :]
        np.testing.assert_allclose(moved, base @ g.rotation.T, atol=1e-12)


class TestGvp:
    """Tests for the single GVP layer."""

    def test_rotation_equivariance(self, params):
        rng = make_rng(2)
        h, Z = Tensor(rng.standard_normal((5, 8))), Tensor(rng.standard_normal((5, 4, 3)))
        R = random_se3(3).rotation
        s, V = equinet.gvp(h, Z, params, "gvp.1.node.")
        s_rot, V_rot = equinet.gvp(h, Tensor(Z.data @ R.T), params, "gvp.1.node.")
        np.testing.assert_allclose(s_rot.data, s.data, atol=1e-12)
        np.testing.assert_allclose(V_rot.data, V.data @ R.T, atol=1e-12)

    def test_gradients(self, gvp_config):
        raw = equinet.init_params(gvp_config)
        prefix = "gvp.1.node."
        names = [prefix + k for k in ("Wh", "Ws", "bs", "Wmu", "Wg", "bg")]
        rng = make_rng(4)
        h, Z = rng.standard_normal((3, 8)), rng.standard_normal((3, 4, 3))

        def f(hh, ZZ, *weights):
            s, V = equinet.gvp(hh, ZZ, dict(zip(names, weights)), prefix)
            return (s * s).sum() + (V * V).sum()

        report = grad_check(f, [h, Z] + [raw[n] for n in names])
        assert report.passed


class TestMessagePassing:
    """Tests for one graph layer and the scalar fusion."""

    def test_layer_equivariance(self, params, cloud_pair):
        X, _ = cloud_pair
        g = random_se3(8)
        moved = apply_se3(g, X)
        graph = knn_graph(X, 4)
        out = equinet.gvp_g_layer(equinet.init_states(X, 8), graph, equinet.edge_features(X, graph), params, 0)
        out_moved = equinet.gvp_g_layer(equinet.init_states(moved, 8), graph, equinet.edge_features(moved, graph),
                                        params, 0)
        assert out.h.shape == (14, 8) and out.Z.shape == (14, 4, 3)
        np.testing.assert_allclose(out_moved.h.data, out.h.data, atol=1e-10)
        np.testing.assert_allclose(out_moved.Z.data, out.Z.data @ g.rotation.T, atol=1e-10)

    def test_fuse_shape(self, params):
        rng = make_rng(6)
        fused = equinet.fuse(Tensor(rng.standard_normal((5, 8))), Tensor(rng.standard_normal((5, 8))), params, 0)
        assert fused.shape == (5, 8)


class TestCrossGvp:
    """Tests for the pairwise network."""

    def test_output_shapes(self, params, gvp_config, cloud_pair):
        X, Y = cloud_pair
        out = equinet.cross_gvp(X, Y, params, gvp_config)
        for vec in out.as_tuple():
            assert vec.shape == (14, 3)
        assert out.h_X.shape == (14, gvp_config.dim)

    def test_independent_equivariance(self, params, gvp_config, cloud_pair):
        X, Y = cloud_pair
        g1, g2 = random_se3(10), random_se3(11)
        out = equinet.cross_gvp(X, Y, params, gvp_config)
        moved = equinet.cross_gvp(apply_se3(g1, X), apply_se3(g2, Y), params, gvp_config)
        assert rel_err(moved.u_X.data, out.u_X.data @ g1.rotation.T) <= 1e-5
        assert rel_err(moved.v_X.data, out.v_X.data @ g1.rotation.T) <= 1e-5
        assert rel_err(moved.u_Y.data, out.u_Y.data @ g2.rotation.T) <= 1e-5
        assert rel_err(moved.v_Y.data, out.v_Y.data @ g2.rotation.T) <= 1e-5

    def test_other_shape_motion_is_ignored(self, params, gvp_config, cloud_pair):
        X, Y = cloud_pair
        out = equinet.cross_gvp(X, Y, params, gvp_config)
        moved = equinet.cross_gvp(X, apply_se3(random_se3(12), Y), params, gvp_config)
        assert rel_err(moved.u_X.data, out.u_X.data) <= 1e-5
        assert rel_err(moved.h_X.data, out.h_X.data) <= 1e-5

    def test_without_cross_attention_shapes_do_not_talk(self, cloud_pair):
        config = equinet.CrossGvpConfig(layers=2, dim=8, vector_dim=4, k=4, cross_attention=False)
        params = {n: Tensor(p) for n, p in equinet.init_params(config).items()}
        X, Y = cloud_pair
        other = PointCloud(make_rng(99).standard_normal((14, 3)))
        a = equinet.cross_gvp(X, Y, params, config)
        b = equinet.cross_gvp(X, other, params, config)
        np.testing.assert_array_equal(a.u_X.data, b.u_X.data)

    def test_too_few_points(self, params, gvp_config):
        small = PointCloud(np.arange(12.0).reshape(4, 3) ** 1.5)
        with pytest.raises(ValueError):
            equinet.cross_gvp(small, small, params, gvp_config)

    def test_attention_rows_are_distributions(self, params):
        rng = make_rng(5)
        w = equinet.attention_weights(Tensor(rng.standard_normal((6, 8))), Tensor(rng.standard_normal((9, 8))),
                                      params, 0)
        assert w.shape == (6, 9)
        np.testing.assert_allclose(w.data.sum(axis=1), np.ones(6))

    def test_backward_reaches_every_weight(self, gvp_config, cloud_pair):
        X, Y = cloud_pair
        leaves = {n: Tensor(p, requires_grad=True) for n, p in equinet.init_params(gvp_config).items()}
        with Tape():
            out = equinet.cross_gvp(X, Y, leaves, gvp_config)
            loss = sum(((v * v).sum() for v in out.as_tuple()), Tensor(0.0))
        grads = backward(loss, wrt=list(leaves.values()))
        assert all(np.all(np.isfinite(g)) for g in grads.values())
        assert np.any(grads[leaves["gvp.0.msg.Ws"]] != 0)
