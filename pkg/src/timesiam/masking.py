"""Mask rules for the current window of a Siamese pair.

All rules mask an exact number of steps, ``round(ratio * T)`` (halves round
up), per masked unit: the whole window for the shared rules, each channel for
the ``channel_*`` rules.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

MASK_RULES = ("binomial", "channel_binomial", "continuous", "channel_continuous", "mask_last")
SHARED_RULES = ("binomial", "continuous", "mask_last")


@dataclass
class MaskSpec:
    rule: str = "channel_continuous"
    ratio: float = 0.25
    mean_segment_length: int = 12

    def validate(self) -> None:
        if self.rule not in MASK_RULES:
            raise ConfigError(f"unknown mask rule {self.rule!r}; expected one of {MASK_RULES}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"mask ratio must lie in [0, 1], got {self.ratio}")
        if self.mean_segment_length < 1:
            raise ConfigError("mean_segment_length must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)


def masked_count(ratio: float, length: int) -> int:
    return int(math.floor(ratio * length + 0.5))


def _binomial_row(length: int, n: int, rng: np.random.Generator) -> np.ndarray:
    row = np.zeros(length, dtype=bool)
    if n:
        row[rng.choice(length, size=n, replace=False)] = True
    return row


def _continuous_row(length: int, n: int, mean_len: int, rng: np.random.Generator) -> np.ndarray:
    """Union of geometric-length segments at uniform starts, trimmed to exactly ``n``."""
    row = np.zeros(length, dtype=bool)
    count = 0
    p = 1.0 / mean_len
    while count < n:
        start = int(rng.integers(0, length))
        seg = int(rng.geometric(p))
        fresh = np.flatnonzero(~row[start:start + seg]) + start
        take = fresh[: n - count]
        row[take] = True
        count += len(take)
    return row


def make_mask(length: int, n_channels: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(length, n_channels)`` mask, true where a value is hidden."""
    spec.validate()
    n = masked_count(spec.ratio, length)
    rule = spec.rule
    if rule == "mask_last":
        row = np.zeros(length, dtype=bool)
        if n:
            row[length - n:] = True
        return np.repeat(row[:, None], n_channels, axis=1)
    if rule == "binomial":
        return np.repeat(_binomial_row(length, n, rng)[:, None], n_channels, axis=1)
    if rule == "continuous":
        row = _continuous_row(length, n, spec.mean_segment_length, rng)
        return np.repeat(row[:, None], n_channels, axis=1)
    if rule == "channel_binomial":
        return np.stack([_binomial_row(length, n, rng) for _ in range(n_channels)], axis=1)
    # channel_continuous
    return np.stack(
        [_continuous_row(length, n, spec.mean_segment_length, rng) for _ in range(n_channels)], axis=1
    )


def apply_mask(window: np.ndarray, spec: MaskSpec, rng: np.random.Generator, fill: float = 0.0):
    """Return ``(masked_window, mask)`` for a ``(T, C)`` window."""
    window = np.asarray(window)
    mask = make_mask(window.shape[0], window.shape[1], spec, rng)
    masked = np.where(mask, np.asarray(fill, dtype=window.dtype), window)
    return masked, mask


def render_mask(mask: np.ndarray, masked_char: str = "#", visible_char: str = ".") -> str:
    """ASCII grid, one row per time step and one column per channel."""
    return "\n".join("".join(masked_char if v else visible_char for v in row) for row in mask)
