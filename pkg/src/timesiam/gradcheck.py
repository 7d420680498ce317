"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class NondeterministicClosureError(RuntimeError):
    """The closure returned different losses for identical parameters."""


@dataclass
class GradCheckResult:
    max_relative_error: float
    n_checked: int
    worst: tuple[int, tuple[int, ...]] | None

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_relative_error < tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    closure: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare backprop gradients of ``closure()`` with central differences.

    ``closure`` must rebuild the graph and return a scalar loss each call.
    When ``n_samples`` is given, that many coordinates are drawn uniformly
    (without replacement) across all parameters; otherwise every coordinate
    is checked.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = closure()
    ag.backward(loss, inputs=params)
    analytic = [p.grad.copy() for p in params]
    base = float(loss.data)
    with ag.no_grad():
        again = float(closure().data)
    if again != base:
        raise NondeterministicClosureError(f"closure returned {base!r} then {again!r}; disable dropout")

    coords = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(*p.shape)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[j] for j in sorted(picks)]

    worst_err, worst = 0.0, None
    with ag.no_grad():
        for i, idx in coords:
            data = params[i].data
            orig = data[idx]
            data[idx] = orig + eps
            plus = float(closure().data)
            data[idx] = orig - eps
            minus = float(closure().data)
            data[idx] = orig
            numeric = (plus - minus) / (2.0 * eps)
            err = relative_error(float(analytic[i][idx]), numeric)
            if err > worst_err:
                worst_err, worst = err, (i, idx)
    return GradCheckResult(worst_err, len(coords), worst)


def end_to_end_check(seed: int = 0, n_samples: int = 120, batch_size: int = 2, eps: float = 1e-5) -> GradCheckResult:
    """Finite-difference check of the full pre-training loss on the tiny preset.

    Runs in float64 with dropout disabled; ``n_samples`` coordinates are drawn
    across every parameter of embedding, lineage set, encoder, decoder and
    projector.
    """
    from .config import ModelConfig
    from .data import make_pretrain_batch, synthetic_seasonal_ar
    from .model import SiameseModel

    cfg = ModelConfig.tiny()
    rng = np.random.default_rng(seed)
    frame = synthetic_seasonal_ar(length=cfg.seq_len * (cfg.sampling_ratio + 4), n_channels=cfg.n_channels, seed=seed)
    batch = make_pretrain_batch(frame, cfg, rng, batch_size)
    with ag.default_dtype(np.float64):
        model = SiameseModel(cfg, seed=seed).eval()

    def closure():
        return model.pretrain_forward(batch)[0]

    return grad_check(closure, model.parameters(), eps=eps, n_samples=n_samples, rng=rng)
