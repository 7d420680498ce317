import math

import numpy as np
import pytest

from timesiam import autograd as ag
from timesiam.autograd import Tensor
from timesiam.errors import ConfigError, ShapeMismatchError
from timesiam.nn import LayerNorm, Linear, Module, MultiHeadAttention, multi_head_attention
from timesiam.gradcheck import grad_check


def _zero(lin):
    lin.weight.data[:] = 0
    if lin.bias is not None:
        lin.bias.data[:] = 0


class TestAttention:
    def test_single_token_returns_value_projection(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        x = Tensor(rng.normal(size=(1, 1, 8)).astype(np.float32))
        out = mha(x, x, x).data
        expected = mha.out_proj(mha.v_proj(x)).data
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)

    def test_zero_query_key_gives_uniform_weights(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        _zero(mha.q_proj)
        _zero(mha.k_proj)
        x = Tensor(rng.normal(size=(1, 5, 8)).astype(np.float32))
        out = mha(x, x, x).data
        mean_value = mha.v_proj(x).data.mean(axis=1, keepdims=True)
        expected = mha.out_proj(Tensor(mean_value)).data
        np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), rtol=1e-5, atol=1e-6)

    def test_scalar_oracle_two_tokens_one_head(self):
        with ag.default_dtype(np.float64):
            mha = MultiHeadAttention(1, 1, np.random.default_rng(0))
        mha.q_proj.weight.data[:] = 0.5
        mha.q_proj.bias.data[:] = 0.1
        mha.k_proj.weight.data[:] = -1.5
        mha.v_proj.weight.data[:] = 2.0
        mha.v_proj.bias.data[:] = -0.3
        mha.out_proj.weight.data[:] = 0.7
        mha.out_proj.bias.data[:] = 0.2
        xs = [0.4, -1.2]
        out = mha(*(Tensor(np.array(xs).reshape(1, 2, 1)),) * 3).data.reshape(-1)

        expected = []
        for xq in xs:
            q = 0.5 * xq + 0.1
            logits = [q * (-1.5 * xk) for xk in xs]
            m = max(logits)
            w = [math.exp(s - m) for s in logits]
            w = [v / sum(w) for v in w]
            att = sum(wi * (2.0 * xk - 0.3) for wi, xk in zip(w, xs))
            expected.append(0.7 * att + 0.2)
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 3, rng)

    def test_functional_wrapper_checks_heads(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        x = Tensor(np.zeros((1, 2, 8), dtype=np.float32))
        with pytest.raises(ConfigError):
            multi_head_attention(x, x, x, 4, mha)

    def test_attention_gradients(self, rng):
        with ag.default_dtype(np.float64):
            mha = MultiHeadAttention(4, 2, rng)
            q = Tensor(rng.normal(size=(2, 3, 4)))
            kv = Tensor(rng.normal(size=(2, 5, 4)))
            w = rng.normal(size=(2, 3, 4))
            res = grad_check(lambda: (mha(q, kv, kv) * Tensor(w)).sum(), mha.parameters())
        assert res.max_relative_error < 1e-6


class _Toy(Module):
    def __init__(self, rng):
        self.a = Linear(3, 2, rng)
        self.blocks = [LayerNorm(2), LayerNorm(2)]


class TestModule:
    def test_parameter_names_follow_assignment_order(self, rng):
        names = [n for n, _ in _Toy(rng).named_parameters()]
        assert names == ["a.weight", "a.bias", "blocks.0.weight", "blocks.0.bias", "blocks.1.weight", "blocks.1.bias"]

    def test_linear_init_ranges(self, rng):
        lin = Linear(30, 20, rng)
        assert np.abs(lin.weight.data).max() <= math.sqrt(6 / 50)
        assert not lin.bias.data.any()

    def test_load_state_dict_validates_before_writing(self, rng):
        model = _Toy(rng)
        before = model.state_dict()
        bad = dict(before)
        bad["blocks.1.bias"] = np.zeros(5)
        bad["a.weight"] = np.ones((3, 2))
        with pytest.raises(ShapeMismatchError, match="blocks.1.bias"):
            model.load_state_dict(bad)
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])
