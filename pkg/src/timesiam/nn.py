"""Parameter containers and transformer building blocks on top of :mod:`autograd`."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError, ShapeMismatchError


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype or ag.get_default_dtype())


def normal_init(rng: np.random.Generator, shape, std: float = 0.02, dtype=None) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(dtype or ag.get_default_dtype())


class Module:
    """Minimal parameter tree.

    Parameters, sub-modules, and lists/dicts of sub-modules assigned as
    attributes are discovered in assignment order, which makes parameter names
    (and therefore checkpoint layouts) deterministic.
    """

    training: bool = True

    def _children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else ag.get_default_dtype()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        """Copy arrays into parameters; all shapes are validated before any write."""
        own = OrderedDict(self.named_parameters())
        for name, p in own.items():
            if name not in state:
                if strict:
                    raise ShapeMismatchError(name, p.shape, None)
                continue
            found = np.shape(state[name])
            if found != p.shape:
                raise ShapeMismatchError(name, p.shape, found)
        if strict:
            for name in state:
                if name not in own:
                    raise ShapeMismatchError(name, None, np.shape(state[name]))
        for name, p in own.items():
            if name in state:
                p.data = np.array(state[name], dtype=p.dtype, copy=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(xavier_uniform(rng, in_features, out_features))
        self.bias = Parameter(np.zeros(out_features, dtype=ag.get_default_dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects {self.in_features} input features, got {x.shape}")
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=ag.get_default_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=ag.get_default_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self._rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return ag.dropout(x, self.p, self._rng, self.training)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, dropout: Dropout | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes."""
    d = q.shape[-1]
    scores = ag.scale(ag.matmul(q, k.T), 1.0 / math.sqrt(d))
    weights = ag.softmax(scores, axis=-1)
    if dropout is not None:
        weights = dropout(weights)
    return ag.matmul(weights, v)


class MultiHeadAttention(Module):
    """Multi-head attention over ``(..., tokens, d_model)`` inputs.

    The key projection carries no bias: a key bias shifts every logit of a
    query row by the same amount and cancels in the softmax.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dropout: float = 0.0,
                 dropout_rng: np.random.Generator | None = None):
        if n_heads < 1 or d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng, bias=False)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.dropout = Dropout(dropout, dropout_rng or rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, m, _ = x.shape
        x = x.reshape(*lead, m, self.n_heads, self.d_model // self.n_heads)
        return x.swapaxes(-2, -3)

    def _merge(self, x: Tensor) -> Tensor:
        x = x.swapaxes(-2, -3)
        *lead, m, _, _ = x.shape
        return x.reshape(*lead, m, self.d_model)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        if key.shape[-2] != value.shape[-2]:
            raise ShapeError(f"key/value token counts differ: {key.shape} vs {value.shape}")
        if not (query.shape[-1] == key.shape[-1] == value.shape[-1] == self.d_model):
            raise ShapeError("attention inputs must all have the model dimension as last axis")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        out = scaled_dot_product_attention(q, k, v, self.dropout)
        return self.out_proj(self._merge(out))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, params: MultiHeadAttention) -> Tensor:
    if params.n_heads != heads:
        raise ConfigError(f"attention block was built with {params.n_heads} heads, asked for {heads}")
    return params(q, k, v)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dropout: float = 0.0,
                 dropout_rng: np.random.Generator | None = None):
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)
        self.dropout = Dropout(dropout, dropout_rng or rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.dropout(ag.gelu(self.fc1(x))))
