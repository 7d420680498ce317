"""Downstream use of a pre-trained Siamese encoder.

Representations are fused over lineage embeddings, then a forecasting or
classification head is trained on top, either together with the encoder
(``full``) or alone (``linear_probe``). The lineage set stays frozen in both
modes.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import Checkpoint
from .config import FinetuneConfig, ModelConfig
from .data import (
    LabeledWindows,
    Standardizer,
    TimeSeriesFrame,
    chronological_split,
    instance_normalize,
    sliding_windows,
)
from .embedding import TokenSequence, add_lineage, lineage_matching
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .metrics import MetricsReport, classification_metrics, mae, mse
from .model import SiameseModel
from .nn import Linear, Module
from .optim import Adam

logger = logging.getLogger(__name__)

FROZEN_PREFIXES = ("lineage.", "decoder.", "projector.")


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def _encode_with(model: SiameseModel, embedded: TokenSequence, index: int) -> TokenSequence:
    return model.encode(add_lineage(embedded, model.lineage.rows([index])))


def fuse_fixed(model: SiameseModel, x, n: int) -> TokenSequence:
    """Mean of the encodings of ``x`` under lineage rows ``0 .. n-1``."""
    n_max = model.config.n_lineages + 1
    if not 1 <= n <= n_max:
        raise ConfigError(f"number of lineages must lie in [1, {n_max}], got {n}")
    embedded = model.embedding(model._input(x))
    if n == 1:
        return _encode_with(model, embedded, 0)
    total = _encode_with(model, embedded, 0).tokens
    for i in range(1, n):
        total = total + _encode_with(model, embedded, i).tokens
    return TokenSequence(total * (1.0 / n), "encoded")


def extended_lineage(i: int, model_config: ModelConfig) -> int:
    """Lineage row for the ``i``-th segment back from the newest one.

    Offsets beyond the largest pre-training distance reuse the last row.
    """
    offset = min(i * model_config.seq_len, model_config.max_distance)
    return lineage_matching(offset, model_config.seq_len, model_config.sampling_ratio, model_config.n_lineages)


def fuse_extended(model: SiameseModel, x) -> TokenSequence:
    """Encode an input of ``(k+1)*T`` steps segment by segment.

    Segment 0 is the most recent ``T`` steps. Outputs are concatenated along
    the token axis, newest first.
    """
    cfg = model.config
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if arr.ndim == 2:
        arr = arr[None]
    length = arr.shape[1]
    if length == 0 or length % cfg.seq_len:
        raise ConfigError(f"length must be a multiple of {cfg.seq_len} (got {length})")
    k1 = length // cfg.seq_len
    parts = []
    for i in range(k1):
        stop = length - i * cfg.seq_len
        segment = arr[:, stop - cfg.seq_len:stop]
        embedded = model.embedding(model._input(segment))
        parts.append(_encode_with(model, embedded, extended_lineage(i, cfg)).tokens)
    if len(parts) == 1:
        return TokenSequence(parts[0], "encoded")
    return TokenSequence(ag.concat(parts, axis=2), "encoded")


def fuse(model: SiameseModel, x, fusion: str, n: int | None = None) -> TokenSequence:
    if fusion == "single":
        return fuse_fixed(model, x, 1)
    if fusion == "fixed_multi_lineage":
        return fuse_fixed(model, x, n if n is not None else model.config.n_lineages + 1)
    if fusion == "extended_multi_lineage":
        return fuse_extended(model, x)
    raise ConfigError(f"unknown fusion {fusion!r}")


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def channel_major(tokens: Tensor, backbone: str, n_channels: int) -> Tensor:
    """Rearrange ``(B, G, M, D)`` tokens into ``(B, C, tokens_per_channel * D)``."""
    b, g, m, d = tokens.shape
    if backbone == "patch":
        return tokens.reshape(b, g, m * d)
    if m % n_channels:
        raise ShapeError(f"{m} variate tokens do not split over {n_channels} channels")
    s = m // n_channels
    x = tokens.reshape(b, s, n_channels, d).swapaxes(1, 2)
    return x.reshape(b, n_channels, s * d)


class ForecastHead(Module):
    """Per-channel flatten followed by one shared linear map to ``horizon`` steps."""

    def __init__(self, tokens_per_channel: int, d_model: int, horizon: int, backbone: str,
                 n_channels: int, rng: np.random.Generator):
        self.backbone = backbone
        self.n_channels = n_channels
        self.horizon = horizon
        self.linear = Linear(tokens_per_channel * d_model, horizon, rng)

    def __call__(self, h: TokenSequence, stats=None) -> Tensor:
        flat = channel_major(h.tokens, self.backbone, self.n_channels)
        y = self.linear(flat).transpose(0, 2, 1)  # (B, O, C)
        if stats is None:
            return y
        return y * Tensor(stats.std.astype(y.dtype)) + Tensor(stats.mean.astype(y.dtype))


class ClassifyHead(Module):
    def __init__(self, d_model: int, n_classes: int, rng: np.random.Generator):
        if n_classes < 2:
            raise ConfigError(f"classification needs at least 2 classes, got {n_classes}")
        self.n_classes = n_classes
        self.linear = Linear(d_model, n_classes, rng)

    def __call__(self, h: TokenSequence) -> Tensor:
        return self.linear(h.tokens.mean(axis=(1, 2)))


def predict_labels(logits) -> np.ndarray:
    """Argmax over classes; ties go to the lowest index."""
    return np.argmax(np.asarray(logits.data if isinstance(logits, Tensor) else logits), axis=-1)


# ---------------------------------------------------------------------------
# downstream model
# ---------------------------------------------------------------------------

class Downstream(Module):
    """A pre-trained :class:`SiameseModel` plus a task head.

    Parameter names are those of the Siamese model followed by ``head.*``, so
    encoder tensors keep their names between pre-training and fine-tuning
    checkpoints.
    """

    def __init__(self, siamese: SiameseModel, task: str, fusion: str = "fixed_multi_lineage",
                 lineages_used: int | None = None, input_len: int | None = None,
                 horizon: int | None = None, n_classes: int | None = None, seed: int = 0):
        cfg = siamese.config
        self.siamese = siamese
        self.task = task
        self.fusion = FinetuneConfig(fusion=fusion).fusion
        self.lineages_used = lineages_used if lineages_used is not None else cfg.n_lineages + 1
        self.input_len = input_len if input_len is not None else cfg.seq_len
        FinetuneConfig(task=task, fusion=self.fusion, lineages_used=self.lineages_used,
                       input_len=self.input_len, n_classes=n_classes or 2).validate(cfg)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
        segments = self.input_len // cfg.seq_len if self.fusion == "extended_multi_lineage" else 1
        per_segment = cfg.seq_len // cfg.patch_len if cfg.backbone == "patch" else 1
        if task == "forecast":
            if not horizon or horizon < 1:
                raise ConfigError("forecasting needs a positive horizon")
            self.horizon = int(horizon)
            self.head = ForecastHead(segments * per_segment, cfg.d_model, self.horizon, cfg.backbone,
                                     cfg.n_channels, rng)
        elif task == "classify":
            self.n_classes = int(n_classes or 0)
            self.head = ClassifyHead(cfg.d_model, self.n_classes, rng)
        else:
            raise ConfigError(f"unknown task {task!r}")

    def _children(self):
        yield from self.siamese._children()
        yield "head", self.head

    @property
    def config(self) -> ModelConfig:
        return self.siamese.config

    def represent(self, x_norm) -> TokenSequence:
        return fuse(self.siamese, x_norm, self.fusion, self.lineages_used)

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        expected = (self.input_len, self.config.n_channels)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ShapeError(f"expected inputs of shape (B, {expected[0]}, {expected[1]}), got {x.shape}")
        return x

    def __call__(self, x) -> Tensor:
        """Forecast in the input's scale, or class logits."""
        x_norm, stats = instance_normalize(self._check_input(x))
        h = self.represent(x_norm.astype(self.siamese.dtype))
        if self.task == "forecast":
            return self.head(h, stats)
        return self.head(h)

    def predict(self, x, horizon: int | None = None, batch_size: int = 256) -> np.ndarray:
        if horizon is not None and self.task == "forecast" and horizon != self.horizon:
            raise ConfigError(f"model forecasts {self.horizon} steps, asked for {horizon}")
        x = self._check_input(x)
        out = []
        with ag.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self(x[i:i + batch_size]).data.astype(np.float64))
        return np.concatenate(out, axis=0)

    def frozen_names(self, mode: str) -> list[str]:
        names = [n for n, _ in self.named_parameters()]
        if mode == "linear_probe":
            return [n for n in names if not n.startswith("head.")]
        return [n for n in names if n.startswith(FROZEN_PREFIXES)]

    def trainable_parameters(self, mode: str) -> list:
        frozen = set(self.frozen_names(mode))
        return [p for n, p in self.named_parameters() if n not in frozen]

    def downstream_config(self) -> dict:
        d = {"task": self.task, "fusion": self.fusion, "lineages_used": self.lineages_used,
             "input_len": self.input_len}
        if self.task == "forecast":
            d["horizon"] = self.horizon
        else:
            d["n_classes"] = self.n_classes
        return d

    def checkpoint_config(self) -> dict:
        return {"model": self.config.to_dict(), "downstream": self.downstream_config()}


class MultiHorizonForecaster(Module):
    """One independently fine-tuned :class:`Downstream` per horizon."""

    def __init__(self, models: dict):
        self.models = OrderedDict((f"o{m.horizon}", m) for m in sorted(models.values(), key=lambda m: m.horizon))
        self.task = "forecast"

    @property
    def horizons(self) -> list[int]:
        return [m.horizon for m in self.models.values()]

    @property
    def config(self) -> ModelConfig:
        return next(iter(self.models.values())).config

    @property
    def input_len(self) -> int:
        return next(iter(self.models.values())).input_len

    def predict(self, x, horizon: int, batch_size: int = 256) -> np.ndarray:
        key = f"o{horizon}"
        if key not in self.models:
            raise ConfigError(f"no head for horizon {horizon}; available {self.horizons}")
        return self.models[key].predict(x, batch_size=batch_size)

    def checkpoint_config(self) -> dict:
        first = next(iter(self.models.values())).downstream_config()
        first.pop("horizon")
        first["horizons"] = self.horizons
        return {"model": self.config.to_dict(), "downstream": first}


def build_downstream(config: dict) -> Module:
    """Rebuild an untrained downstream model from a checkpoint config."""
    mc = ModelConfig.from_dict(config["model"])
    ds = dict(config["downstream"])
    horizons = ds.pop("horizons", None)
    if horizons is not None:
        return MultiHorizonForecaster(
            {h: Downstream(SiameseModel(mc), horizon=h, **ds) for h in horizons}
        )
    return Downstream(SiameseModel(mc), **ds)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _predictor(model):
    if callable(getattr(model, "predict", None)):
        return model.predict
    if callable(model):
        return model
    raise TypeError("model must provide predict(x, horizon) or be callable")


def evaluate_forecast(model, test_values, horizons, input_len: int | None = None,
                      stride: int = 1) -> MetricsReport:
    """MSE and MAE per horizon on sliding test windows.

    ``model`` is a fine-tuned forecaster or any callable ``f(x, horizon)``
    returning ``(B, horizon, C)``. Horizons longer than the test series
    allows are skipped with a warning.
    """
    predict = _predictor(model)
    if input_len is None:
        input_len = getattr(model, "input_len", None)
        if input_len is None:
            raise ConfigError("input_len is required for a plain callable")
    values = test_values.values if isinstance(test_values, TimeSeriesFrame) else np.asarray(test_values)
    report = MetricsReport("forecast")
    for h in horizons:
        x, y = sliding_windows(values, input_len, h, stride)
        if len(x) == 0:
            logger.warning("horizon %d skipped: test series of length %d has no full window", h, len(values))
            continue
        pred = np.asarray(predict(x, h))
        if pred.shape != y.shape:
            raise ShapeError(f"prediction shape {pred.shape} does not match targets {y.shape}")
        report.forecast[int(h)] = {"mse": mse(pred, y), "mae": mae(pred, y)}
    return report


def evaluate_classify(model, data: LabeledWindows) -> MetricsReport:
    """Accuracy, precision, recall, F1, AUROC, AUPRC on labelled windows.

    ``model`` maps ``(B, T, C)`` windows to ``(B, K)`` scores. Rank metrics
    that are undefined (a single class present) are reported as ``None``.
    """
    if len(data) == 0:
        raise DataError("no examples to evaluate")
    predict = _predictor(model)
    scores = np.asarray(predict(data.windows))
    if scores.shape != (len(data), data.n_classes):
        raise ShapeError(f"scores of shape {scores.shape}, expected {(len(data), data.n_classes)}")
    return MetricsReport("classify", classify=classification_metrics(data.labels, scores, data.n_classes))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _siamese_from(checkpoint) -> SiameseModel:
    if isinstance(checkpoint, SiameseModel):
        return checkpoint
    if isinstance(checkpoint, Checkpoint):
        if checkpoint.is_downstream:
            raise ConfigError("expected a pre-training checkpoint, got a fine-tuned one")
        model = SiameseModel(checkpoint.model_config)
        model.load_state_dict(checkpoint.state)
        return model
    raise TypeError(f"cannot build a model from {type(checkpoint).__name__}")


def _fit(model: Downstream, x: np.ndarray, y: np.ndarray, cfg: FinetuneConfig, log=None) -> list[float]:
    """Mini-batch Adam on ``(x, y)``; returns per-epoch mean losses."""
    siamese = model.siamese
    siamese.reseed_dropout(cfg.seed)
    model.train()
    if cfg.mode == "linear_probe":
        siamese.eval()
    params = model.trainable_parameters(cfg.mode)
    opt = Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(4,)))
    n = len(x)
    steps = max(1, math.ceil(n / cfg.batch_size))
    if cfg.max_steps_per_epoch:
        steps = min(steps, cfg.max_steps_per_epoch)
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            if len(idx) == 0:
                idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            out = model(x[idx])
            if model.task == "forecast":
                loss = ag.mse(out, Tensor(y[idx].astype(out.dtype)))
            else:
                loss = ag.cross_entropy(out, y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(s + 1, value)
            for p in params:
                p.grad = None
            ag.backward(loss, inputs=params)
            opt.step()
            total += value
        losses.append(total / steps)
        line = f"epoch={epoch} mean_loss={losses[-1]:.6f}"
        logger.info(line)
        if log is not None:
            log(line)
    model.eval()
    return losses


def split_forecast_data(dataset, input_len: int, ratios=(0.7, 0.1, 0.2)):
    """Standardized ``(train, test)`` arrays.

    The scaler is fitted on the training slice only; the test slice starts
    ``input_len`` rows early so its first window has full context.
    """
    if isinstance(dataset, TimeSeriesFrame):
        train, _, test = chronological_split(dataset, ratios=ratios, lookback=input_len)
    else:
        train, _, test = dataset
    train_v = train.values if isinstance(train, TimeSeriesFrame) else np.asarray(train, dtype=np.float64)
    test_v = test.values if isinstance(test, TimeSeriesFrame) else np.asarray(test, dtype=np.float64)
    scaler = Standardizer.fit(train_v)
    return scaler.transform(train_v), scaler.transform(test_v)


def split_labeled(dataset, ratio: float = 0.7, seed: int = 0):
    if isinstance(dataset, LabeledWindows):
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(dataset))
        cut = int(round(ratio * len(dataset)))
        return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))
    train, test = dataset
    return train, test


def finetune(checkpoint, dataset, config: FinetuneConfig, log=None):
    """Fine-tune a pre-trained model and report test metrics.

    ``checkpoint`` is a pre-training :class:`Checkpoint` or a
    :class:`SiameseModel`. For forecasting ``dataset`` is a frame (split
    70/10/20 in time) or a ``(train, val, test)`` triple; each horizon gets
    its own copy of the encoder. For classification it is a
    :class:`LabeledWindows` (split 70/30 at random) or a ``(train, test)``
    pair.

    Returns ``(model, report)``; ``model`` is a :class:`Downstream`, or a
    :class:`MultiHorizonForecaster` when several horizons are requested.
    """
    base = _siamese_from(checkpoint)
    mc = base.config
    config.validate(mc)
    input_len = config.resolved_input_len(mc)
    state = base.state_dict()

    def fresh(**head) -> Downstream:
        siamese = SiameseModel(mc, seed=config.seed)
        siamese.load_state_dict(state)
        siamese.astype(base.dtype)
        return Downstream(siamese, config.task, config.fusion, config.lineages_used, input_len,
                          seed=config.seed, **head)

    if config.task == "forecast":
        train_v, test_v = split_forecast_data(dataset, input_len)
        if train_v.shape[1] != mc.n_channels:
            raise DataError(f"data has {train_v.shape[1]} channels, checkpoint expects {mc.n_channels}")
        models = {}
        for h in config.horizons:
            x, y = sliding_windows(train_v, input_len, h)
            if len(x) == 0:
                raise DataError(f"training split of length {len(train_v)} too short for horizon {h}")
            model = fresh(horizon=h)
            _fit(model, x, y, config, log)
            models[h] = model
        final = models[config.horizons[0]] if len(models) == 1 else MultiHorizonForecaster(models)
        report = evaluate_forecast(final, test_v, config.horizons, input_len, config.eval_stride)
        return final, report

    train, test = split_labeled(dataset, seed=config.seed)
    if train.n_channels != mc.n_channels:
        raise DataError(f"data has {train.n_channels} channels, checkpoint expects {mc.n_channels}")
    if train.seq_len != input_len:
        raise DataError(f"windows have length {train.seq_len}, model expects {input_len}")
    model = fresh(n_classes=train.n_classes)
    _fit(model, train.windows, train.labels, config, log)
    return model, evaluate_classify(model, test)
