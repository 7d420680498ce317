"""Pre-training loop."""
from __future__ import annotations

import logging
import math
from typing import Callable

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint
from .config import ModelConfig, PretrainConfig
from .data import TimeSeriesFrame, count_windows, make_pretrain_batch, worker_rng
from .errors import ConfigError, DivergenceError
from .model import SiameseModel
from .optim import Adam

logger = logging.getLogger(__name__)


def default_steps_per_epoch(n_windows: int, batch_size: int) -> int:
    return max(1, math.ceil(n_windows / batch_size))


def format_epoch_line(epoch: int, mean_loss: float) -> str:
    return f"epoch={epoch} mean_loss={mean_loss:.6f}"


def pretrain(
    frame: TimeSeriesFrame,
    model_config: ModelConfig,
    pretrain_config: PretrainConfig,
    model: SiameseModel | None = None,
    log: Callable[[str], None] | None = None,
) -> Checkpoint:
    """Run ``epochs * steps_per_epoch`` Adam steps on random Siamese batches.

    The returned checkpoint carries the trained model in ``.model`` and the
    per-epoch mean losses in ``meta["epoch_losses"]``. Identical inputs and
    seed give bitwise-identical parameters.
    """
    model_config.validate()
    pretrain_config.validate()
    values = frame.values if isinstance(frame, TimeSeriesFrame) else np.asarray(frame)
    if values.shape[1] != model_config.n_channels:
        raise ConfigError(f"data has {values.shape[1]} channels, model expects {model_config.n_channels}")
    n_windows = count_windows(len(values), model_config.seq_len)
    if n_windows == 0:
        raise ConfigError(f"series of length {len(values)} is shorter than the window length {model_config.seq_len}")

    seed = pretrain_config.seed
    if model is None:
        model = SiameseModel(model_config, seed=seed)
    model.train()
    rng = worker_rng(seed, 0)
    steps = pretrain_config.steps_per_epoch or default_steps_per_epoch(n_windows, pretrain_config.batch_size)
    opt = Adam(model.parameters(), lr=pretrain_config.learning_rate)

    epoch_losses: list[float] = []
    step = 0
    for epoch in range(1, pretrain_config.epochs + 1):
        total = 0.0
        for _ in range(steps):
            step += 1
            batch = make_pretrain_batch(values, model_config, rng, pretrain_config.batch_size)
            loss, _ = model.pretrain_forward(batch, pretrain_config.loss_mode)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            opt.zero_grad()
            ag.backward(loss)
            opt.step()
            total += value
        mean_loss = total / steps
        epoch_losses.append(mean_loss)
        line = format_epoch_line(epoch, mean_loss)
        logger.info(line)
        if log is not None:
            log(line)
    model.eval()

    meta = {
        "stage": "pretrain",
        "epoch": pretrain_config.epochs,
        "steps": step,
        "final_loss": epoch_losses[-1] if epoch_losses else None,
        "seed": seed,
        "epoch_losses": epoch_losses,
    }
    return Checkpoint(model.checkpoint_config(), model.state_dict(), meta, model)
