"""Window-to-token embeddings and the lineage embedding set.

Token tensors are laid out as ``(B, G, M, D)``: batch, independent groups
(channels in patch mode, a single group in variate mode), tokens per group,
model dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .nn import Linear, Module, Parameter, normal_init

TOKEN_KINDS = ("embedded", "encoded", "decoded")


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, G, M, D)
    kind: str = "embedded"

    @property
    def n_groups(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[2]

    @property
    def d_model(self) -> int:
        return self.tokens.shape[3]


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    return Tensor(x)


class PatchEmbedding(Module):
    """Non-overlapping patches of each channel mapped linearly to ``d_model``,
    plus a learnable embedding per patch position."""

    def __init__(self, seq_len: int, patch_len: int, d_model: int, rng: np.random.Generator):
        if patch_len > seq_len:
            raise ConfigError(f"patch_len={patch_len} exceeds window length {seq_len}")
        if seq_len % patch_len:
            raise ConfigError(f"window length {seq_len} is not a multiple of patch_len={patch_len}")
        self.seq_len = seq_len
        self.patch_len = patch_len
        self.n_patches = seq_len // patch_len
        self.value = Linear(patch_len, d_model, rng)
        self.position = Parameter(normal_init(rng, (self.n_patches, d_model)))

    def __call__(self, window) -> TokenSequence:
        x = _as_tensor(window, self.dtype)
        b, t, c = x.shape
        if t != self.seq_len:
            raise ShapeError(f"patch embedding expects windows of length {self.seq_len}, got {t}")
        x = x.transpose(0, 2, 1).reshape(b, c, self.n_patches, self.patch_len)
        return TokenSequence(self.value(x) + self.position, "embedded")


class VariateEmbedding(Module):
    """Each channel's full series becomes one token."""

    def __init__(self, seq_len: int, d_model: int, rng: np.random.Generator):
        self.seq_len = seq_len
        self.value = Linear(seq_len, d_model, rng)

    def __call__(self, window) -> TokenSequence:
        x = _as_tensor(window, self.dtype)
        b, t, c = x.shape
        if t != self.seq_len:
            raise ShapeError(f"variate embedding expects windows of length {self.seq_len}, got {t}")
        x = x.transpose(0, 2, 1).reshape(b, 1, c, t)
        return TokenSequence(self.value(x), "embedded")


def patch_embed(window, patch_len: int, d_model: int, params: PatchEmbedding) -> TokenSequence:
    if params.patch_len != patch_len or params.position.shape[1] != d_model:
        raise ConfigError("patch embedding parameters do not match the requested geometry")
    return params(window)


def variate_embed(window, d_model: int, params: VariateEmbedding) -> TokenSequence:
    if params.value.out_features != d_model:
        raise ConfigError("variate embedding parameters do not match d_model")
    return params(window)


def lineage_matching(d: int, seq_len: int, sampling_ratio: int, n_lineages: int) -> int:
    """Map a past-to-current distance to a lineage index.

    ``d = 0`` maps to index 0; positive distances fall into ``n_lineages``
    equal-width bins over ``(0, seq_len * sampling_ratio]``.
    """
    if n_lineages < 1:
        raise ConfigError("n_lineages must be >= 1")
    max_d = seq_len * sampling_ratio
    d = int(d)
    if not 0 <= d <= max_d:
        raise ValueError(f"distance {d} outside [0, {max_d}]")
    if d == 0:
        return 0
    return min(n_lineages, 1 + (d - 1) * n_lineages // max_d)


class LineageSet(Module):
    """``n_lineages + 1`` learnable rows; row 0 tags the current window."""

    def __init__(self, n_lineages: int, d_model: int, seq_len: int, sampling_ratio: int,
                 rng: np.random.Generator):
        self.n_lineages = n_lineages
        self.seq_len = seq_len
        self.sampling_ratio = sampling_ratio
        self.weight = Parameter(normal_init(rng, (n_lineages + 1, d_model)))

    @property
    def max_distance(self) -> int:
        return self.seq_len * self.sampling_ratio

    def match(self, d) -> np.ndarray:
        d = np.atleast_1d(np.asarray(d, dtype=np.int64))
        return np.array([lineage_matching(v, self.seq_len, self.sampling_ratio, self.n_lineages) for v in d])

    def rows(self, indices) -> Tensor:
        """``(B, D)`` rows selected by lineage index."""
        return ag.take(self.weight, np.atleast_1d(indices))


def add_lineage(tokens: TokenSequence, e: Tensor) -> TokenSequence:
    """Broadcast-add a lineage row to every token in every group.

    ``e`` is ``(D,)`` (shared by the batch) or ``(B, D)`` (one row per sample).
    """
    d = tokens.d_model
    if e.shape[-1] != d or e.ndim not in (1, 2):
        raise ShapeError(f"lineage embedding of shape {e.shape} does not fit d_model={d}")
    if e.ndim == 2:
        if e.shape[0] not in (1, tokens.tokens.shape[0]):
            raise ShapeError(f"{e.shape[0]} lineage rows for a batch of {tokens.tokens.shape[0]}")
        e = e.reshape(e.shape[0], 1, 1, d)
    return TokenSequence(tokens.tokens + e, tokens.kind)
