import numpy as np
import pytest

from timesiam.config import ModelConfig, PretrainConfig
from timesiam.data import synthetic_seasonal_ar
from timesiam.errors import ConfigError, DivergenceError
from timesiam.model import SiameseModel
from timesiam.training import default_steps_per_epoch, format_epoch_line, pretrain


def desk_config():
    return ModelConfig(seq_len=48, n_channels=3, d_model=32, d_ff=64, n_heads=4, e_layers=2, d_layers=1,
                       n_lineages=3, sampling_ratio=6, patch_len=8, dropout=0.0)


def test_loss_halves_within_200_steps():
    frame = synthetic_seasonal_ar(3000, 3, seed=0)
    lines = []
    ckpt = pretrain(frame, desk_config(),
                    PretrainConfig(learning_rate=1e-3, batch_size=32, epochs=10, steps_per_epoch=20, seed=0),
                    log=lines.append)
    losses = ckpt.meta["epoch_losses"]
    assert ckpt.meta["steps"] == 200
    assert all(np.isfinite(losses))
    assert losses[-1] <= 0.5 * losses[0]
    assert lines[0].startswith("epoch=1 mean_loss=")


def test_zero_epochs_returns_initialization(small_config):
    frame = synthetic_seasonal_ar(200, 2, seed=1)
    ckpt = pretrain(frame, small_config, PretrainConfig(epochs=0, seed=4))
    init = SiameseModel(small_config, seed=4).state_dict()
    assert list(ckpt.state) == list(init)
    for name, value in init.items():
        np.testing.assert_array_equal(ckpt.state[name], value)


def test_same_seed_same_bytes(small_config):
    frame = synthetic_seasonal_ar(200, 2, seed=1)
    small_config.dropout = 0.1
    cfg = PretrainConfig(epochs=2, steps_per_epoch=3, batch_size=4, seed=9)
    a = pretrain(frame, small_config, cfg)
    b = pretrain(frame, small_config, cfg)
    assert a.to_bytes() == b.to_bytes()
    assert a.meta["epoch_losses"] == b.meta["epoch_losses"]
    c = pretrain(frame, small_config, PretrainConfig(epochs=2, steps_per_epoch=3, batch_size=4, seed=10))
    assert c.to_bytes() != a.to_bytes()


def test_nan_aborts(small_config):
    values = synthetic_seasonal_ar(200, 2, seed=1).values.copy()
    values[:] = np.nan
    with pytest.raises(DivergenceError):
        pretrain(values, small_config, PretrainConfig(epochs=1, steps_per_epoch=2, batch_size=2))


def test_channel_mismatch(small_config):
    with pytest.raises(ConfigError):
        pretrain(synthetic_seasonal_ar(200, 3), small_config, PretrainConfig(epochs=1))


def test_helpers():
    assert default_steps_per_epoch(100, 32) == 4
    assert format_epoch_line(3, 0.5) == "epoch=3 mean_loss=0.500000"
