import numpy as np
import pytest

from timesiam.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig.tiny()


@pytest.fixture
def small_config():
    """Patch backbone, two layers, big enough for short training runs."""
    return ModelConfig(seq_len=16, n_channels=2, d_model=16, d_ff=32, n_heads=2, e_layers=1, d_layers=1,
                       n_lineages=2, sampling_ratio=2, patch_len=4, dropout=0.0)


ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: (int(k.split()[0].rstrip("ab")), k)):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
