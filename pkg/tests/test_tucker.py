import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elrt import autodiff as ad
from elrt.tensor import ConvGeometry, conv2d_direct, verification_mode
from elrt.tucker import DenseConv, Tucker2Conv, dense_reference, forward, init, reconstruct_kernel


def loop_reconstruct(layer):
    u1, g, u2 = layer.u1, layer.core_g, layer.u2
    r1, r2, k, _ = g.shape
    c_in, c_out = u1.shape[1], u2.shape[1]
    w = np.zeros((c_in, c_out, k, k))
    for p in range(c_in):
        for q in range(c_out):
            for i in range(k):
                for j in range(k):
                    w[p, q, i, j] = sum(g[a, b, i, j] * u1[a, p] * u2[b, q] for a in range(r1) for b in range(r2))
    return w


class TestForward:
    def test_identity_factors(self, f64, rng):
        g = ConvGeometry(3, 4, 3, 1, 1)
        core = rng.standard_normal((3, 4, 3, 3))
        layer = Tucker2Conv(np.eye(3), core, np.eye(4), g)
        x = rng.standard_normal((2, 3, 5, 5))
        np.testing.assert_array_equal(forward(layer, x), conv2d_direct(x, core, g))

    def test_matches_reconstructed_dense(self, rng):
        g = ConvGeometry(3, 4, 3, 1, 1)
        layer = init(g, 2, 2, seed=3)
        x = rng.standard_normal((2, 3, 6, 6))
        assert np.abs(forward(layer, x) - dense_reference(layer, x)).max() <= 1e-4
        with verification_mode():
            layer64 = Tucker2Conv(*(np.asarray(t, np.float64) for t in (layer.u1, layer.core_g, layer.u2)), g)
            assert np.abs(forward(layer64, x) - dense_reference(layer64, x)).max() <= 1e-10

    def test_zero_core(self, rng):
        g = ConvGeometry(3, 4, 3, 2, 1)
        layer = init(g, 2, 3, seed=0)
        layer.core_g = np.zeros_like(layer.core_g)
        assert np.all(forward(layer, rng.standard_normal((2, 3, 7, 7))) == 0)

    def test_single_image_input(self, rng):
        layer = init(ConvGeometry(2, 3, 3, 1, 1), 2, 2, seed=0)
        x = rng.standard_normal((2, 5, 5))
        np.testing.assert_allclose(forward(layer, x), forward(layer, x[None])[0])

    def test_channel_mismatch(self):
        layer = init(ConvGeometry(3, 4, 3), 2, 2, seed=0)
        with pytest.raises(ValueError, match="channel"):
            forward(layer, np.ones((1, 2, 5, 5)))

    def test_linearity(self, f64, rng):
        g = ConvGeometry(3, 2, 3, 2, 1)
        layer = init(g, 2, 2, seed=5)
        x1, x2 = rng.standard_normal((2, 1, 3, 6, 6))
        np.testing.assert_allclose(forward(layer, 2 * x1 - 3 * x2), 2 * forward(layer, x1) - 3 * forward(layer, x2),
                                   atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1),
           st.integers(3, 8), st.integers(0, 2**31))
    def test_fuzz_equivalence(self, c_in, c_out, k, stride, pad, hw, seed):
        g = ConvGeometry(c_in, c_out, k, stride, pad)
        r = np.random.default_rng(seed)
        r1 = int(r.integers(1, c_in * k * k + 1))
        r2 = int(r.integers(1, c_out + 1))
        with verification_mode():
            layer = init(g, r1, r2, seed=seed)
            x = r.standard_normal((2, c_in, hw, hw))
            assert np.abs(forward(layer, x) - dense_reference(layer, x)).max() <= 1e-10


class TestReconstruct:
    def test_rank_one(self):
        g = ConvGeometry(3, 2, 2)
        u1 = np.array([[1.0, 0, 0]])
        u2 = np.array([[1.0, 0]])
        core = np.arange(4.0).reshape(1, 1, 2, 2)
        w = reconstruct_kernel(Tucker2Conv(u1, core, u2, g))
        expected = np.zeros((3, 2, 2, 2))
        expected[0, 0] = core[0, 0]
        np.testing.assert_array_equal(w, expected)

    def test_identity_factors_return_core(self, f64, rng):
        core = rng.standard_normal((3, 4, 3, 3))
        w = reconstruct_kernel(Tucker2Conv(np.eye(3), core, np.eye(4), ConvGeometry(3, 4, 3)))
        np.testing.assert_array_equal(w, core)

    def test_matches_quadruple_loop(self, f64, rng):
        g = ConvGeometry(3, 4, 3)
        layer = Tucker2Conv(rng.standard_normal((2, 3)), rng.standard_normal((2, 3, 3, 3)),
                            rng.standard_normal((3, 4)), g)
        np.testing.assert_allclose(reconstruct_kernel(layer), loop_reconstruct(layer), atol=1e-12)


class TestInit:
    def test_deterministic(self):
        g = ConvGeometry(4, 6, 3)
        a, b = init(g, 3, 4, seed=11), init(g, 3, 4, seed=11)
        for t1, t2 in zip((a.u1, a.core_g, a.u2), (b.u1, b.core_g, b.u2)):
            np.testing.assert_array_equal(t1, t2)

    def test_xavier_bound(self):
        layer = init(ConvGeometry(4, 4, 3), 4, 4, seed=0)
        assert np.abs(layer.u1).max() <= np.sqrt(6 / 8)

    def test_finite_output(self):
        layer = init(ConvGeometry(4, 8, 3, 1, 1), 3, 5, seed=0)
        y = forward(layer, np.ones((1, 4, 6, 6)))
        assert np.all(np.isfinite(y))

    @pytest.mark.parametrize("r1,r2", [(0, 2), (4 * 9 + 1, 2), (2, 0), (2, 9)])
    def test_rank_bounds(self, r1, r2):
        with pytest.raises(ValueError, match="rank"):
            init(ConvGeometry(4, 8, 3), r1, r2, seed=0)

    def test_param_count(self):
        layer = init(ConvGeometry(5, 7, 3), 2, 3, seed=0)
        assert layer.param_count == 2 * 5 + 2 * 3 * 9 + 3 * 7
        assert layer.param_count == sum(v.size for v in layer.parameters().values())
        assert DenseConv.init(ConvGeometry(5, 7, 3), 0).param_count == 5 * 7 * 9

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="core shape"):
            Tucker2Conv(np.ones((2, 3)), np.ones((2, 2, 3, 3)), np.ones((3, 4)), ConvGeometry(3, 4, 3))


class TestLayerGradient:
    def test_tucker_layer_with_cross_entropy(self, rng):
        g = ConvGeometry(3, 2, 3, 1, 1)
        x = rng.standard_normal((4, 3, 5, 5))
        labels = np.array([0, 1, 1, 0])

        def f(tape, p):
            layer = Tucker2Conv(p["u1"].value, p["core"].value, p["u2"].value, g)
            y = layer.forward(x, tape, prefix="")
            return ad.cross_entropy(ad.global_avg_pool(y), labels)

        layer = init(g, 2, 2, seed=1)
        rep = ad.grad_check(f, {"u1": layer.u1, "core": layer.core_g, "u2": layer.u2})
        assert rep.passed, str(rep)
