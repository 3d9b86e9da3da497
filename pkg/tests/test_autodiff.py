import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from hpdt import autodiff as ad


def matmul_oracle(x, w, b=None):
    """Triple-loop reference for y = x @ w + b."""
    n, k = x.shape
    k2, m = w.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += x[i, l] * w[l, j]
            out[i, j] = acc + (b[j] if b is not None else 0.0)
    return out


def max_rel_err(analytic, oracle, floor=1e-6):
    analytic = np.asarray(analytic)
    oracle = np.asarray(oracle)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(oracle)), floor)
    return float(np.max(np.abs(analytic - oracle) / denom))


class TestLinear:
    def test_identity(self):
        y = ad.linear(ad.constant([[1.0, 2.0]]), ad.constant(np.eye(2)), ad.constant([0.0, 0.0]))
        npt.assert_array_equal(y.data, [[1.0, 2.0]])

    def test_diagonal_scaling(self):
        y = ad.linear(
            ad.constant([[1.0, 0.0], [0.0, 1.0]]),
            ad.constant([[2.0, 0.0], [0.0, 3.0]]),
            ad.constant([1.0, 1.0]),
        )
        npt.assert_array_equal(y.data, [[3.0, 1.0], [1.0, 4.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=2)
        y = ad.linear(ad.constant(x), ad.constant(w), ad.constant(b))
        npt.assert_allclose(y.data, matmul_oracle(x, w, b), atol=1e-12)

    def test_oracle_on_many_shapes(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n, k, m = rng.integers(1, 17, size=3)
            x = rng.normal(size=(n, k))
            w = rng.normal(size=(k, m))
            b = rng.normal(size=m)
            y = ad.linear(ad.constant(x), ad.constant(w), ad.constant(b))
            npt.assert_allclose(y.data, matmul_oracle(x, w, b), atol=1e-12)

    def test_shape_mismatch_error(self):
        with pytest.raises(ValueError, match="width"):
            ad.linear(ad.constant(np.ones((2, 3))), ad.constant(np.ones((4, 2))))

    def test_broadcasts_bias_over_leading_dims(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 5, 3))
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=4)
        y = ad.linear(ad.constant(x), ad.constant(w), ad.constant(b))
        for i in range(2):
            npt.assert_allclose(y.data[i], matmul_oracle(x[i], w, b), atol=1e-12)


class TestGelu:
    def test_zero(self):
        assert ad.gelu(ad.constant(0.0)).item() == 0.0

    def test_large_input_asymptote(self):
        assert abs(ad.gelu(ad.constant(10.0)).item() - 10.0) < 1e-6

    def test_matches_direct_formula(self):
        x = -0.5
        direct = 0.5 * x * (1.0 + math.tanh(ad.GELU_SCALE * (x + ad.GELU_CUBIC * x**3)))
        assert abs(ad.gelu(ad.constant(x)).item() - direct) < 1e-12


class TestSoftmax:
    def test_uniform(self):
        npt.assert_allclose(ad.softmax_rows(ad.constant([0.0, 0.0, 0.0])).data, np.ones(3) / 3)

    def test_stability(self):
        out = ad.softmax_rows(ad.constant([1000.0, 0.0, 0.0])).data
        assert np.all(np.isfinite(out))
        npt.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-12)

    def test_extended_precision_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=12) * 5
        out = ad.softmax_rows(ad.constant(x)).data
        xe = x.astype(np.longdouble)
        ref = np.exp(xe) / np.exp(xe).sum()
        npt.assert_allclose(out, ref.astype(np.float64), atol=1e-9)

    @given(st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=1, max_size=16))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, row):
        out = ad.softmax_rows(ad.constant(row)).data
        assert abs(out.sum() - 1.0) <= 1e-9


class TestLayerNorm:
    def _gain_bias(self, n):
        return ad.constant(np.ones(n)), ad.constant(np.zeros(n))

    def test_constant_row_maps_to_zero(self):
        g, b = self._gain_bias(4)
        out = ad.layer_norm(ad.constant([5.0, 5.0, 5.0, 5.0]), g, b).data
        npt.assert_array_equal(out, np.zeros(4))

    def test_two_point_standardization(self):
        g, b = self._gain_bias(2)
        out = ad.layer_norm(ad.constant([1.0, 3.0]), g, b).data
        npt.assert_allclose(out, [-1.0, 1.0], atol=1e-4)

    def test_random_row_statistics(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=64) * 3 + 1
        g, b = self._gain_bias(64)
        out = ad.layer_norm(ad.constant(x), g, b).data
        assert abs(out.mean()) <= 1e-9
        assert abs(out.var() - 1.0) <= 1e-4


class TestMseLoss:
    def test_zero_when_equal(self):
        p = ad.constant([1.0, 2.0])
        assert ad.mse_loss(p, [1.0, 2.0], [1.0, 1.0]).item() == 0.0

    def test_basic_average(self):
        assert ad.mse_loss(ad.constant([1.0, 2.0]), [0.0, 0.0], [1.0, 1.0]).item() == 2.5

    def test_masked_position_ignored(self):
        loss = ad.mse_loss(ad.constant([1.0, 2.0, 9.0]), [0.0, 0.0, 0.0], [1.0, 1.0, 0.0])
        assert loss.item() == 2.5

    def test_all_zero_mask_rejected(self):
        with pytest.raises(ValueError, match="all zero"):
            ad.mse_loss(ad.constant([1.0]), [0.0], [0.0])

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ValueError, match="0 or 1"):
            ad.mse_loss(ad.constant([1.0]), [0.0], [0.5])


class TestBackward:
    def test_linear_function_exact_grad(self):
        x = np.array([4.0, 5.0, 6.0])
        with ad.Tape() as tape:
            w = ad.Parameter("w", np.array([1.0, 2.0, 3.0]))
            loss = ad.sum_all(ad.mul(w, ad.constant(x)))
        ad.backward(loss, tape)
        npt.assert_array_equal(w.grad, x)

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        w = ad.Parameter("w", rng.normal(size=(3, 2)) * 0.5)
        b = ad.Parameter("b", rng.normal(size=2) * 0.1)
        x = ad.constant(rng.normal(size=(4, 3)))
        t = rng.normal(size=(4, 2))
        mask = np.ones((4, 2))

        def f():
            return ad.mse_loss(ad.gelu(ad.linear(x, w, b)), t, mask).item()

        with ad.Tape() as tape:
            loss = ad.mse_loss(ad.gelu(ad.linear(x, w, b)), t, mask)
        ad.backward(loss, tape)
        fd = ad.finite_difference_gradient(f, [w, b])
        assert max_rel_err(w.grad, fd["w"]) <= 1e-4
        assert max_rel_err(b.grad, fd["b"]) <= 1e-4

    def test_grads_accumulate_across_backward_calls(self):
        with ad.Tape() as tape:
            w = ad.Parameter("w", np.array([1.0, -2.0]))
            loss = ad.sum_all(ad.mul(w, w))
        ad.backward(loss, tape)
        once = w.grad.copy()
        ad.backward(loss, tape)
        npt.assert_array_equal(w.grad, 2 * once)

    def test_non_scalar_loss_rejected(self):
        with ad.Tape() as tape:
            w = ad.Parameter("w", np.ones(3))
            y = ad.mul(w, w)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(y, tape)

    def test_unreached_parameter_keeps_zero_grad(self):
        with ad.Tape() as tape:
            w = ad.Parameter("w", np.ones(2))
            unused = ad.Parameter("unused", np.ones(2))
            loss = ad.sum_all(w)
        ad.backward(loss, tape)
        npt.assert_array_equal(unused.grad, np.zeros(2))

    def test_zero_grads(self):
        with ad.Tape() as tape:
            w = ad.Parameter("w", np.ones(2))
            loss = ad.sum_all(w)
        ad.backward(loss, tape)
        ad.zero_grads([w])
        npt.assert_array_equal(w.grad, np.zeros(2))
        assert w.grad.shape == w.data.shape


class TestOpGradients:
    """Every primitive used by the model, checked against central differences."""

    @pytest.mark.parametrize("name,builder", [
        ("softmax", lambda t: ad.sum_all(ad.mul(ad.softmax_rows(t), ad.constant(np.arange(6.0).reshape(2, 3))))),
        ("layer_norm", lambda t: ad.sum_all(ad.mul(
            ad.layer_norm(t, ad.constant(np.ones(3)), ad.constant(np.zeros(3))),
            ad.constant(np.arange(6.0).reshape(2, 3))))),
        ("gelu", lambda t: ad.sum_all(ad.gelu(t))),
        ("sin", lambda t: ad.sum_all(ad.sin(t))),
        ("mean_axis", lambda t: ad.sum_all(ad.mul(ad.mean_axis(t, 0), ad.constant(np.arange(3.0))))),
        ("transpose", lambda t: ad.sum_all(ad.mul(ad.transpose(t, (1, 0)), ad.constant(np.arange(6.0).reshape(3, 2))))),
        ("narrow", lambda t: ad.sum_all(ad.narrow(t, 1, 1, 2))),
        ("index_select", lambda t: ad.sum_all(ad.index_select(t, 0, np.array([0, 0, 1])))),
        ("concat", lambda t: ad.sum_all(ad.mul(ad.concat([t, t], axis=1), ad.constant(np.arange(12.0).reshape(2, 6))))),
        ("softmax_masked", lambda t: ad.sum_all(ad.mul(
            ad.softmax_rows(ad.add(t, ad.constant(np.triu(np.full((2, 3), -1e9), k=1)[:2, :3]))),
            ad.constant(np.arange(6.0).reshape(2, 3))))),
    ])
    def test_primitive_gradient(self, name, builder):
        rng = np.random.default_rng(hash(name) % 2**32)
        p = ad.Parameter("p", rng.normal(size=(2, 3)))

        def f():
            return builder(p).item()

        with ad.Tape() as tape:
            loss = builder(p)
        ad.backward(loss, tape)
        fd = ad.finite_difference_gradient(f, [p])
        assert max_rel_err(p.grad, fd["p"]) <= 1e-4, name

    def test_matmul_gradient(self):
        rng = np.random.default_rng(11)
        a = ad.Parameter("a", rng.normal(size=(2, 2, 3, 4)))
        b = ad.Parameter("b", rng.normal(size=(2, 2, 4, 3)))

        def f():
            return ad.sum_all(ad.matmul(a, b)).item()

        with ad.Tape() as tape:
            loss = ad.sum_all(ad.matmul(a, b))
        ad.backward(loss, tape)
        fd = ad.finite_difference_gradient(f, [a, b])
        assert max_rel_err(a.grad, fd["a"]) <= 1e-4
        assert max_rel_err(b.grad, fd["b"]) <= 1e-4


class TestFiniteDifferences:
    def test_square(self):
        p = ad.Parameter("p", np.array(3.0))
        fd = ad.finite_difference_gradient(lambda: float(p.data**2), [p])
        assert abs(fd["p"] - 6.0) < 1e-8

    def test_sine(self):
        p = ad.Parameter("p", np.array(0.0))
        fd = ad.finite_difference_gradient(lambda: math.sin(float(p.data)), [p])
        assert abs(fd["p"] - 1.0) < 1e-8

    def test_rejects_non_finite(self):
        p = ad.Parameter("p", np.array(0.0))
        with pytest.raises(ValueError, match="non-finite"):
            ad.finite_difference_gradient(lambda: float("nan"), [p])

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError, match="positive"):
            ad.finite_difference_gradient(lambda: 0.0, [], h=0.0)


class TestAdam:
    def _param(self, value):
        return ad.Parameter("p", np.asarray(value, dtype=np.float64))

    def test_zero_grad_leaves_params_unchanged(self):
        p = self._param([1.0, -2.0])
        state = ad.AdamState.for_params([p])
        before = p.data.copy()
        ad.adam_step([p], state, lr=1e-2)
        npt.assert_array_equal(p.data, before)

    def test_descends_against_constant_gradient(self):
        p = self._param([0.0])
        state = ad.AdamState.for_params([p])
        for _ in range(50):
            p.grad[...] = 2.0
            ad.adam_step([p], state, lr=1e-2)
            p.grad[...] = 0.0
        assert p.data[0] < 0.0

    def test_first_step_has_signed_lr_magnitude(self):
        lr = 1e-4
        for g in (1.5, -0.7):
            p = self._param([0.3])
            state = ad.AdamState.for_params([p])
            p.grad[...] = g
            ad.adam_step([p], state, lr=lr)
            delta = p.data[0] - 0.3
            assert abs(delta - (-lr * np.sign(g))) < 1e-9

    def test_grads_not_cleared_by_step(self):
        p = self._param([0.0])
        state = ad.AdamState.for_params([p])
        p.grad[...] = 1.0
        ad.adam_step([p], state, lr=1e-3)
        npt.assert_array_equal(p.grad, np.ones(1))

    def test_step_counter_increments(self):
        p = self._param([0.0])
        state = ad.AdamState.for_params([p])
        ad.adam_step([p], state, lr=1e-3)
        ad.adam_step([p], state, lr=1e-3)
        assert state.step == 2


class TestDeterminism:
    def test_identical_runs_bitwise(self):
        def run():
            rng = np.random.default_rng(42)
            w = ad.Parameter("w", rng.normal(size=(4, 4)))
            x = ad.constant(rng.normal(size=(5, 4)))
            t = rng.normal(size=(5, 4))
            with ad.Tape() as tape:
                loss = ad.mse_loss(ad.gelu(ad.linear(x, w, ad.constant(np.zeros(4)))), t,
                                   np.ones((5, 4)))
            ad.backward(loss, tape)
            return loss.item(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        npt.assert_array_equal(g1, g2)


def test_clip_grad_norm():
    p = ad.Parameter("p", np.zeros(4))
    p.grad[...] = 3.0  # norm 6
    total = ad.clip_grad_norm([p], 1.0)
    assert abs(total - 6.0) < 1e-12
    npt.assert_allclose(np.linalg.norm(p.grad), 1.0)
