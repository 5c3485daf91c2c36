import numpy as np
import pytest

from elrt import autodiff as ad
from elrt.tensor import verification_mode


def check(f, params, tol=1e-4):
    report = ad.grad_check(f, params, tol=tol)
    assert report.passed, str(report)
    return report


class TestBackward:
    def test_square(self, f64):
        tape = ad.Tape()
        x = tape.param("x", np.array(3.0))
        g = ad.backward(tape, ad.square(x))
        assert g["x"] == 6.0

    def test_frobenius_of_identity(self, f64):
        tape = ad.Tape()
        a = tape.param("a", np.eye(2))
        g = ad.backward(tape, ad.frobenius_sq(a))
        np.testing.assert_array_equal(g["a"], 2 * np.eye(2))

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        a = tape.param("a", np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(tape, ad.scale(a, 2.0))

    def test_unreachable_param_absent(self, f64):
        tape = ad.Tape()
        a = tape.param("a", np.ones(2))
        tape.param("b", np.ones(2))
        g = ad.backward(tape, ad.sum(a))
        assert set(g) == {"a"}

    def test_reused_param_accumulates(self, f64, rng):
        v = rng.standard_normal(4)
        tape = ad.Tape()
        a = tape.param("a", v)
        g = ad.backward(tape, ad.add(ad.sum(ad.square(a)), ad.sum(ad.mul(a, 3.0))))
        # duplicated-input oracle: d/da (|a|^2 + 3 sum a) = 2a + 3
        np.testing.assert_allclose(g["a"], 2 * v + 3, atol=1e-12)

    def test_param_is_cached_per_key(self):
        tape = ad.Tape()
        assert tape.param("w", np.ones(2)) is tape.param("w", np.ones(2))

    def test_zero_upstream_gives_zero(self, f64, rng):
        tape = ad.Tape()
        a = tape.param("a", rng.standard_normal((3, 3)))
        g = ad.backward(tape, ad.scale(ad.frobenius_sq(a), 0.0))
        assert np.all(g["a"] == 0)

    def test_mixed_tapes_rejected(self):
        a = ad.Tape().param("a", np.ones(2))
        b = ad.Tape().param("b", np.ones(2))
        with pytest.raises(ValueError, match="different tapes"):
            ad.add(a, b)

    def test_untaped_ops_are_eager(self):
        out = ad.matmul(np.eye(2), np.ones(2))
        assert out.tape is None
        np.testing.assert_array_equal(out.value, [1, 1])


class TestGradCheck:
    def test_linear_function_is_exact(self, rng):
        c = np.linspace(1.0, 2.0, 12).reshape(3, 4)
        rep = ad.grad_check(lambda t, p: ad.sum(ad.mul(p["a"], c)), {"a": rng.standard_normal((3, 4))},
                            tol=1e-10)
        assert rep.passed and rep.max_rel_error <= 1e-10

    def test_reports_failure(self, rng):
        # a deliberately wrong vjp must be caught
        def bad(t, p):
            a = p["a"]
            return ad._make("bad", np.asarray(np.sum(a.value ** 2)), (a,), lambda g: (g * a.value,))

        rep = ad.grad_check(bad, {"a": rng.standard_normal(5) + 2})
        assert not rep.passed
        assert "FAIL" in str(rep)


class TestOpGradients:
    @pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
    def test_binary_broadcast(self, rng, op):
        a = rng.standard_normal((3, 4))
        b = rng.uniform(0.5, 2.0, (1, 4))
        check(lambda t, p: ad.sum(ad.square(op(p["a"], p["b"]))), {"a": a, "b": b})

    def test_sqrt_abs_relu(self, rng):
        a = rng.uniform(0.2, 2.0, 6) * np.sign(rng.standard_normal(6))
        check(lambda t, p: ad.sum(ad.mul(ad.relu(p["a"]), ad.sqrt(ad.absolute(p["a"])))), {"a": a})

    def test_matmul_transpose_reshape(self, rng):
        params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}
        check(lambda t, p: ad.frobenius_sq(ad.reshape(ad.matmul(ad.transpose(ad.transpose(p["a"])), p["b"]), (6,))),
              params)

    def test_matvec_and_l2norm(self, rng):
        params = {"m": rng.standard_normal((4, 4)), "v": rng.standard_normal(4)}
        check(lambda t, p: ad.l2norm(ad.matmul(p["m"], p["v"])), params)

    def test_mean_sum_axis(self, rng):
        check(lambda t, p: ad.sum(ad.square(ad.mean(p["a"], axis=0))), {"a": rng.standard_normal((5, 3))})

    def test_max_abs_row_sum(self, rng):
        check(lambda t, p: ad.max_abs_row_sum(p["a"]), {"a": rng.standard_normal((4, 4)) + 0.1}, tol=1e-3)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_conv2d(self, rng, stride, padding):
        params = {"x": rng.standard_normal((2, 3, 6, 5)), "w": rng.standard_normal((3, 2, 3, 3))}
        check(lambda t, p: ad.frobenius_sq(ad.conv2d(p["x"], p["w"], stride, padding)), params)

    def test_mix_channels(self, rng):
        params = {"x": rng.standard_normal((2, 3, 4, 4)), "m": rng.standard_normal((5, 3))}
        check(lambda t, p: ad.frobenius_sq(ad.mix_channels(p["x"], p["m"])), params)

    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm(self, rng, training):
        state = ad.BatchNormState(rng.standard_normal(3), rng.uniform(0.5, 2, 3))
        target = rng.standard_normal((4, 3, 3, 3))
        params = {"x": rng.standard_normal((4, 3, 3, 3)), "g": rng.uniform(0.5, 1.5, 3), "b": rng.standard_normal(3)}

        def f(t, p):
            s = ad.BatchNormState(state.running_mean.copy(), state.running_var.copy())
            return ad.sum(ad.mul(ad.batch_norm(p["x"], p["g"], p["b"], s, training), target))

        check(f, params)

    def test_pool_pad_linear(self, rng):
        params = {"x": rng.standard_normal((2, 3, 4, 4)), "w": rng.standard_normal((2, 6)), "b": rng.standard_normal(2)}
        check(lambda t, p: ad.frobenius_sq(ad.linear(ad.global_avg_pool(ad.shortcut_pad(p["x"], 6, 2)),
                                                     p["w"], p["b"])), params)

    def test_cross_entropy(self, rng):
        labels = np.array([0, 2, 1, 2])
        check(lambda t, p: ad.cross_entropy(p["z"], labels), {"z": rng.standard_normal((4, 3))})


class TestLayers:
    def test_uniform_logits_cross_entropy(self, f64):
        assert ad.cross_entropy(np.zeros((5, 10)), np.arange(5)).item() == pytest.approx(np.log(10), abs=1e-15)

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError, match="out of range"):
            ad.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_batch_norm_running_stats(self, f64, rng):
        x = rng.standard_normal((8, 2, 3, 3)) * 2 + 1
        s = ad.BatchNormState.fresh(2)
        ad.batch_norm(x, np.ones(2), np.zeros(2), s, True)
        m = x.shape[0] * 9
        np.testing.assert_allclose(s.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(s.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))

    def test_batch_norm_normalizes(self, f64, rng):
        x = rng.standard_normal((16, 3, 4, 4)) * 3 + 2
        y = ad.batch_norm(x, np.ones(3), np.zeros(3), ad.BatchNormState.fresh(3), True).value
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_shortcut_pad_layout(self, f64):
        x = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
        y = ad.shortcut_pad(x, 4, 2).value
        assert y.shape == (1, 4, 2, 2)
        np.testing.assert_array_equal(y[0, 1:3], x[0, :, ::2, ::2])
        assert np.all(y[0, 0] == 0) and np.all(y[0, 3] == 0)

    def test_mc_tie_takes_first_row(self, f64):
        a = np.array([[1.0, -2.0], [2.0, 1.0]])
        tape = ad.Tape()
        g = ad.backward(tape, ad.max_abs_row_sum(tape.param("a", a)))["a"]
        np.testing.assert_array_equal(g, [[1.0, -1.0], [0.0, 0.0]])

    def test_float32_by_default(self):
        tape = ad.Tape()
        assert tape.param("w", np.ones(2, dtype=np.float64)).value.dtype == np.float32
        with verification_mode():
            assert ad.Tape().param("w", np.ones(2)).value.dtype == np.float64


class TestRelease:
    def test_release_frees_graph_without_gc(self, rng):
        import gc
        import weakref

        gc.disable()
        try:
            tape = ad.Tape()
            w = tape.param("w", rng.standard_normal((3, 3)))
            hidden = ad.matmul(w, w)
            loss = ad.frobenius_sq(hidden)
            grads = ad.backward(tape, loss)
            probe = weakref.ref(tape)
            value = loss.item()
            tape.release()
            del tape, w, hidden, loss
            assert probe() is None
        finally:
            gc.enable()
        assert "w" in grads and np.isfinite(value)

    def test_values_survive_release(self):
        tape = ad.Tape()
        node = ad.scale(tape.param("a", np.ones(2)), 3.0)
        tape.release()
        assert len(tape) == 0
        np.testing.assert_array_equal(node.value, 3.0)
