"""Series ingestion, chronological splits, windowing, and Siamese pair sampling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DataError, IngestionError
from .masking import apply_mask

NORM_EPS = 1e-5


@dataclass
class TimeSeriesFrame:
    values: np.ndarray
    channel_names: list[str] = field(default_factory=list)
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"frame values must be a non-empty L x C matrix, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            row = int(np.argwhere(~np.isfinite(self.values))[0, 0])
            raise IngestionError(f"non-finite value in row {row}")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.values.shape[1])]
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError("channel_names length does not match the channel count")
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps)
            if len(ts) != len(self.values):
                raise DataError("timestamps length does not match the series length")
            if len(ts) > 1 and not (ts[1:] > ts[:-1]).all():
                raise IngestionError("timestamps are not strictly increasing")
            self.timestamps = ts

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.length

    def slice(self, start: int, stop: int) -> "TimeSeriesFrame":
        ts = self.timestamps[start:stop] if self.timestamps is not None else None
        return _frame_unchecked(self.values[start:stop], self.channel_names, ts)


def _frame_unchecked(values, names, timestamps) -> TimeSeriesFrame:
    frame = TimeSeriesFrame.__new__(TimeSeriesFrame)
    frame.values = values
    frame.channel_names = list(names)
    frame.timestamps = timestamps
    return frame


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

_TIME_HEADERS = {"date", "time", "timestamp", "datetime"}


def _parse_timestamp(cell: str, row: int):
    cell = cell.strip()
    try:
        return int(cell)
    except ValueError:
        pass
    try:
        return np.datetime64(datetime.fromisoformat(cell))
    except ValueError:
        raise IngestionError(f"row {row}: cannot parse timestamp {cell!r}") from None


def load_csv(path, has_timestamp_column: bool | None = None) -> TimeSeriesFrame:
    """Read a header-first CSV of numeric columns.

    With ``has_timestamp_column=None`` the first column is treated as a
    timestamp when its header is one of date/time/timestamp/datetime.
    Row numbers in error messages are 1-based file lines.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise IngestionError(f"{path}: no data rows after the header")
    if has_timestamp_column is None:
        has_timestamp_column = header[0].lower() in _TIME_HEADERS
    first = 1 if has_timestamp_column else 0
    names = header[first:]
    if not names:
        raise IngestionError(f"{path}: no numeric columns")

    values = np.empty((len(body), len(names)), dtype=np.float64)
    stamps = []
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {line} has {len(row)} cells, header has {len(header)}")
        if has_timestamp_column:
            stamps.append(_parse_timestamp(row[0], line))
        for j, cell in enumerate(row[first:]):
            try:
                v = float(cell)
            except ValueError:
                raise IngestionError(f"{path}: row {line}, column {names[j]!r}: cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise IngestionError(f"{path}: row {line}, column {names[j]!r}: non-finite value {cell!r}")
            values[i, j] = v
    timestamps = np.array(stamps) if has_timestamp_column else None
    return TimeSeriesFrame(values, names, timestamps)


def write_csv(path, frame: TimeSeriesFrame) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        stamps = frame.timestamps
        w.writerow((["date"] if stamps is not None else []) + list(frame.channel_names))
        for i, row in enumerate(frame.values):
            lead = [str(stamps[i])] if stamps is not None else []
            w.writerow(lead + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# splits and windows
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]


def split_bounds(length: int, ratios: Sequence[float] | None = None, sizes: Sequence[int] | None = None,
                 lookback: int = 0) -> SplitSpec:
    """Index ranges for train/val/test.

    ``sizes`` gives explicit row counts; otherwise ``ratios`` are applied to
    ``length`` (the test share takes the remainder when the ratios sum to 1).
    ``lookback`` lets the val and test slices start that many rows early, so
    their first input window sees the preceding context; targets never
    overlap.
    """
    if sizes is not None:
        n_train, n_val, n_test = (int(s) for s in sizes)
        if min(n_train, n_val, n_test) < 0:
            raise ConfigError(f"split sizes must be non-negative, got {sizes}")
    else:
        ratios = ratios if ratios is not None else (0.7, 0.1, 0.2)
        if len(ratios) != 3 or min(ratios) < 0:
            raise ConfigError(f"need three non-negative split ratios, got {ratios}")
        total = sum(ratios)
        if total > 1 + 1e-9:
            raise ConfigError(f"split ratios sum to {total} > 1")
        n_train = int(math.floor(length * ratios[0] + 1e-9))
        n_val = int(math.floor(length * ratios[1] + 1e-9))
        if abs(total - 1) <= 1e-9:
            n_test = length - n_train - n_val
        else:
            n_test = int(math.floor(length * ratios[2] + 1e-9))
    if n_train + n_val + n_test > length:
        raise ConfigError(f"split sizes {n_train}+{n_val}+{n_test} exceed series length {length}")
    a, b, c = n_train, n_train + n_val, n_train + n_val + n_test
    val_start = max(0, a - lookback) if n_val else a
    test_start = max(0, b - lookback) if n_test else b
    return SplitSpec((0, a), (val_start, b), (test_start, c))


def chronological_split(frame: TimeSeriesFrame, ratios=None, sizes=None, lookback: int = 0):
    spec = split_bounds(frame.length, ratios, sizes, lookback)
    return tuple(frame.slice(*r) for r in (spec.train, spec.val, spec.test))


def count_windows(length: int, window_len: int, stride: int = 1) -> int:
    if length < window_len:
        return 0
    return (length - window_len) // stride + 1


def sliding_windows(values: np.ndarray, input_len: int, horizon: int, stride: int = 1):
    """Stack (input, target) pairs: ``X`` is ``(n, input_len, C)``, ``Y`` is ``(n, horizon, C)``."""
    n = count_windows(len(values), input_len + horizon, stride)
    c = values.shape[1]
    if n == 0:
        return np.empty((0, input_len, c)), np.empty((0, horizon, c))
    view = np.lib.stride_tricks.sliding_window_view(values, input_len + horizon, axis=0)[::stride]
    windows = np.swapaxes(view, 1, 2)[:n]
    return windows[:, :input_len].copy(), windows[:, input_len:].copy()


class Standardizer:
    """Per-channel z-scoring with statistics from a reference (training) slice."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        values = np.asarray(values, dtype=np.float64)
        return cls(values.mean(axis=0), np.maximum(values.std(axis=0), NORM_EPS))

    def transform(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values) * self.std + self.mean

    def apply(self, frame: TimeSeriesFrame) -> TimeSeriesFrame:
        return _frame_unchecked(self.transform(frame.values), frame.channel_names, frame.timestamps)


@dataclass
class InstanceStats:
    mean: np.ndarray
    std: np.ndarray


def instance_normalize(window: np.ndarray, eps: float = NORM_EPS):
    """Per-channel z-score over the time axis (second to last) of ``(..., T, C)``.

    Uses the population standard deviation, clamped below by ``eps``.
    """
    window = np.asarray(window)
    mean = window.mean(axis=-2, keepdims=True)
    std = np.maximum(window.std(axis=-2, keepdims=True), eps)
    return (window - mean) / std, InstanceStats(mean, std)


def instance_denormalize(window: np.ndarray, stats: InstanceStats) -> np.ndarray:
    return np.asarray(window) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# Siamese pairs
# ---------------------------------------------------------------------------

@dataclass
class SiamesePair:
    x_past: np.ndarray
    x_curr: np.ndarray
    x_curr_masked: np.ndarray
    mask: np.ndarray
    d: int
    curr_start: int


@dataclass
class PairBatch:
    """Stacked pairs: arrays are ``(B, T, C)``; ``d``/``curr_start`` are ``(B,)``."""

    x_past: np.ndarray
    x_curr: np.ndarray
    x_curr_masked: np.ndarray
    mask: np.ndarray
    d: np.ndarray
    curr_start: np.ndarray

    def __len__(self):
        return len(self.d)

    def __getitem__(self, i) -> SiamesePair:
        return SiamesePair(self.x_past[i], self.x_curr[i], self.x_curr_masked[i], self.mask[i],
                           int(self.d[i]), int(self.curr_start[i]))

    @classmethod
    def stack(cls, pairs: Sequence[SiamesePair]) -> "PairBatch":
        return cls(
            np.stack([p.x_past for p in pairs]),
            np.stack([p.x_curr for p in pairs]),
            np.stack([p.x_curr_masked for p in pairs]),
            np.stack([p.mask for p in pairs]),
            np.array([p.d for p in pairs], dtype=np.int64),
            np.array([p.curr_start for p in pairs], dtype=np.int64),
        )


def _values(frame) -> np.ndarray:
    return frame.values if isinstance(frame, TimeSeriesFrame) else np.asarray(frame)


def sample_siamese_pair(frame, seq_len: int, sampling_ratio: int, rng: np.random.Generator,
                        curr_start: int | None = None) -> SiamesePair:
    """Draw a current window uniformly and a past window ``d`` steps earlier.

    ``d`` is uniform on ``{0, ..., min(seq_len * sampling_ratio, curr_start)}``;
    windows near the start of the series get a clamped range rather than
    being rejected. The returned pair is unmasked and unnormalised.
    """
    values = _values(frame)
    length = len(values)
    if seq_len > length:
        raise ConfigError(f"window length {seq_len} exceeds series length {length}")
    if curr_start is None:
        curr_start = int(rng.integers(0, length - seq_len + 1))
    elif not 0 <= curr_start <= length - seq_len:
        raise ConfigError(f"curr_start {curr_start} outside [0, {length - seq_len}]")
    d = int(rng.integers(0, min(seq_len * sampling_ratio, curr_start) + 1))
    past = values[curr_start - d: curr_start - d + seq_len]
    curr = values[curr_start: curr_start + seq_len]
    return SiamesePair(past.copy(), curr.copy(), curr.copy(), np.zeros(curr.shape, dtype=bool), d, curr_start)


def make_pretrain_batch(frame, config: ModelConfig, rng: np.random.Generator, batch_size: int,
                        normalize: bool = True) -> PairBatch:
    """``batch_size`` independent pairs; only the current window is masked.

    With ``normalize`` both windows are instance-normalised before masking, so
    masked positions hold the channel mean (zero).
    """
    pairs = []
    for _ in range(batch_size):
        pair = sample_siamese_pair(frame, config.seq_len, config.sampling_ratio, rng)
        if normalize:
            pair.x_past = instance_normalize(pair.x_past)[0]
            pair.x_curr = instance_normalize(pair.x_curr)[0]
        pair.x_curr_masked, pair.mask = apply_mask(pair.x_curr, config.mask, rng)
        pairs.append(pair)
    return PairBatch.stack(pairs)


def worker_rng(base_seed: int, worker_id: int) -> np.random.Generator:
    """Independent, reproducible stream for one data-loading worker."""
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(2, worker_id)))


# ---------------------------------------------------------------------------
# labelled windows
# ---------------------------------------------------------------------------

@dataclass
class LabeledWindows:
    windows: np.ndarray  # (n, T, C)
    labels: np.ndarray  # (n,)
    n_classes: int

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(zip(self.windows, self.labels))

    @property
    def seq_len(self) -> int:
        return self.windows.shape[1]

    @property
    def n_channels(self) -> int:
        return self.windows.shape[2]

    def subset(self, idx) -> "LabeledWindows":
        return LabeledWindows(self.windows[idx], self.labels[idx], self.n_classes)


def _parse_header(line: str, path) -> tuple[int, int, int]:
    body = line.lstrip("#").split()
    fields_ = {}
    for tok in body:
        key, sep, val = tok.partition("=")
        if not sep:
            raise IngestionError(f"{path}: malformed header token {tok!r}")
        try:
            fields_[key.strip()] = int(val)
        except ValueError:
            raise IngestionError(f"{path}: header value {tok!r} is not an integer") from None
    try:
        t, c, k = fields_["T"], fields_["C"], fields_["K"]
    except KeyError as missing:
        raise IngestionError(f"{path}: header lacks {missing}") from None
    if t < 1 or c < 1 or k < 1:
        raise IngestionError(f"{path}: header values must be positive")
    return t, c, k


def load_labeled_windows(path) -> LabeledWindows:
    """Read the ``# T=.. C=.. K=..`` labelled-window text format."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    lines = [ln for ln in lines if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise IngestionError(f"{path}: missing '# T=<int> C=<int> K=<int>' header")
    t, c, k = _parse_header(lines[0], path)
    body = lines[1:]
    if not body:
        raise IngestionError(f"{path}: no examples")
    windows = np.empty((len(body), t, c), dtype=np.float64)
    labels = np.empty(len(body), dtype=np.int64)
    for i, ln in enumerate(body):
        cells = ln.split(",")
        if len(cells) != 1 + t * c:
            raise IngestionError(f"{path}: line {i + 2} has {len(cells) - 1} values, expected T*C={t * c}")
        tok = cells[0].strip()
        if not tok.isdigit() or int(tok) >= k:
            raise IngestionError(f"{path}: line {i + 2}: unknown label {tok!r} (expected 0..{k - 1})")
        labels[i] = int(tok)
        try:
            vals = np.array([float(v) for v in cells[1:]])
        except ValueError:
            raise IngestionError(f"{path}: line {i + 2}: non-numeric value") from None
        if not np.isfinite(vals).all():
            raise IngestionError(f"{path}: line {i + 2}: non-finite value")
        windows[i] = vals.reshape(t, c)
    return LabeledWindows(windows, labels, k)


def write_labeled_windows(path, data: LabeledWindows) -> None:
    n, t, c = data.windows.shape
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"# T={t} C={c} K={data.n_classes}\n")
        for window, label in data:
            fh.write(",".join([str(int(label))] + [repr(float(v)) for v in window.reshape(-1)]) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def synthetic_seasonal_ar(length: int = 2000, n_channels: int = 3, seed: int = 0,
                          periods: Sequence[float] = (24.0, 12.0, 7.0), noise: float = 0.3,
                          ar_coef: float = 0.7) -> TimeSeriesFrame:
    """Sine mixtures with channel-specific phases plus AR(1) noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)[:, None]
    values = np.zeros((length, n_channels))
    for period in periods:
        amp = rng.uniform(0.5, 1.5, size=n_channels)
        phase = rng.uniform(0, 2 * np.pi, size=n_channels)
        values += amp * np.sin(2 * np.pi * t / period + phase)
    eps = rng.normal(0.0, noise, size=(length, n_channels))
    ar = np.zeros_like(eps)
    for i in range(1, length):
        ar[i] = ar_coef * ar[i - 1] + eps[i]
    values += ar
    return TimeSeriesFrame(values, [f"s{i}" for i in range(n_channels)])


def synthetic_labeled_windows(n: int, seq_len: int, n_channels: int, n_classes: int = 3,
                              seed: int = 0, noise: float = 0.3) -> LabeledWindows:
    """Class ``k`` is a noisy sinusoid whose period depends on ``k``."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n)
    t = np.arange(seq_len)[None, :, None]
    periods = seq_len / (2.0 + 2.0 * labels)[:, None, None]
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, n_channels))
    windows = np.sin(2 * np.pi * t / periods + phase) + rng.normal(0, noise, size=(n, seq_len, n_channels))
    return LabeledWindows(windows, labels.astype(np.int64), n_classes)
