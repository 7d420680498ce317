import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from timesiam import autograd as ag
from timesiam.autograd import Tensor
from timesiam.errors import ShapeError
from timesiam.gradcheck import grad_check

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False, width=32)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = ag.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_row_selection(self):
        out = ag.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_against_triple_loop(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ag.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), rtol=1e-12)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_gradients(self, rng):
        with ag.default_dtype(np.float64):
            a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            res = grad_check(lambda: (ag.matmul(a, b) * ag.matmul(a, b)).sum(), [a, b])
        assert res.max_relative_error < 1e-6


class TestSoftmax:
    def test_zero_row_is_uniform(self):
        np.testing.assert_allclose(ag.softmax_rows(Tensor(np.zeros((1, 4)))).data, [[0.25] * 4])

    def test_large_equal_logits(self):
        out = ag.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_closed_form(self):
        # exp(ln 3) / (1 + 3) = 0.75
        out = ag.softmax_rows(Tensor([[0.0, math.log(3.0)]], dtype=np.float64)).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
    def test_rows_sum_to_one(self, x):
        out = ag.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out >= 0)


class TestLayerNorm:
    def _ln(self, row):
        x = Tensor(np.asarray([row], dtype=np.float64))
        d = x.shape[-1]
        return ag.layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)), 1e-5).data[0]

    def test_constant_row(self):
        np.testing.assert_array_equal(self._ln([4.0, 4.0, 4.0]), [0.0, 0.0, 0.0])

    def test_standardized_row(self):
        np.testing.assert_allclose(self._ln([-1.0, 1.0]), [-1.0, 1.0], atol=1e-5)

    def test_scalar_oracle(self):
        mean = (1 + 2 + 3) / 3
        var = ((1 - mean) ** 2 + (2 - mean) ** 2 + (3 - mean) ** 2) / 3
        expected = [(v - mean) / math.sqrt(var + 1e-5) for v in (1, 2, 3)]
        np.testing.assert_allclose(self._ln([1.0, 2.0, 3.0]), expected, rtol=1e-12)

    def test_gradients(self, rng):
        with ag.default_dtype(np.float64):
            x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
            g = Tensor(rng.normal(size=5), requires_grad=True)
            b = Tensor(rng.normal(size=5), requires_grad=True)
            w = rng.normal(size=(3, 5))
            res = grad_check(lambda: (ag.layer_norm(x, g, b) * Tensor(w)).sum(), [x, g, b])
        assert res.max_relative_error < 1e-6


class TestElementwise:
    def test_mse_identity(self):
        x = Tensor([1.0, -2.0, 3.0])
        assert ag.mse(x, x).item() == 0.0

    def test_mse_unit_offset(self):
        assert ag.mse(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0

    def test_gelu_zero(self):
        assert ag.gelu(Tensor([0.0])).data[0] == 0.0

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_composed_graph_gradients(self, rng):
        with ag.default_dtype(np.float64):
            a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=(3,)), requires_grad=True)

            def loss():
                h = ag.gelu(a * b + 1.0) / (ag.exp(a * 0.1) + 2.0)
                h = ag.concat([h, ag.transpose(a.reshape(3, 2), (1, 0))], axis=1)
                return ag.mean(h * h, axis=0).sum() + ag.scale(h[:, 1:3], 0.5).sum()

            res = grad_check(loss, [a, b])
        assert res.max_relative_error < 1e-6

    def test_take_accumulates_repeated_rows(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        ag.backward(ag.take(table, [0, 0, 2]).sum())
        np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])

    def test_cross_entropy_gradients(self, rng):
        with ag.default_dtype(np.float64):
            z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            res = grad_check(lambda: ag.cross_entropy(z, [0, 2, 1, 2]), [z])
        assert res.max_relative_error < 1e-6


class TestBackward:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
    def test_sum_gives_ones(self, shape):
        x = Tensor(np.random.default_rng(0).normal(size=shape), requires_grad=True)
        ag.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones(shape))

    def test_linear_regression_closed_form(self, rng):
        xs = rng.normal(size=10)
        ys = rng.normal(size=10)
        w = Tensor(np.array(0.7), requires_grad=True, dtype=np.float64)
        loss = ag.mse(w * Tensor(xs, dtype=np.float64), Tensor(ys, dtype=np.float64))
        ag.backward(loss)
        expected = np.mean(2 * xs * (0.7 * xs - ys))
        np.testing.assert_allclose(w.grad, expected, rtol=1e-12)

    def test_shared_node_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        ag.backward((x * x + x).sum())
        np.testing.assert_allclose(x.grad, [5.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            ag.backward(x * 2.0)

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with ag.no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_deep_chain_is_iterative(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        ag.backward(y.sum())
        np.testing.assert_array_equal(x.grad, [1.0])

    def test_dropout_deterministic_under_seed(self):
        x = Tensor(np.ones((4, 8)))
        a = ag.dropout(x, 0.5, np.random.default_rng(3), True).data
        b = ag.dropout(x, 0.5, np.random.default_rng(3), True).data
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ag.dropout(x, 0.5, None, False).data, x.data)
