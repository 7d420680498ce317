"""Principal-component view of per-lineage representations."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import instance_normalize
from .errors import ConfigError
from .model import SiameseModel

logger = logging.getLogger(__name__)


def power_iteration(matrix: np.ndarray, rng: np.random.Generator, n_iter: int = 1000, tol: float = 1e-8):
    """Dominant eigenpair of a symmetric PSD matrix."""
    v = rng.normal(size=matrix.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(n_iter):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            break
        v = w
    return float(v @ matrix @ v), v


def principal_components(x: np.ndarray, k: int = 2, n_iter: int = 1000, tol: float = 1e-8, seed: int = 0):
    """Top-``k`` covariance eigenvectors by power iteration with deflation.

    Returns ``(components, eigenvalues)`` with components as rows. A component
    whose eigenvalue is numerically zero is returned as a zero vector.
    """
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(len(x) - 1, 1)
    scale = np.trace(cov)
    rng = np.random.default_rng(seed)
    comps, vals = [], []
    for i in range(k):
        val, vec = power_iteration(cov, rng, n_iter, tol)
        if scale == 0.0 or val <= 1e-12 * scale:
            logger.warning("covariance has rank %d < %d; component %d set to zero", i, k, i + 1)
            comps.append(np.zeros(x.shape[1]))
            vals.append(0.0)
            continue
        comps.append(vec)
        vals.append(val)
        cov = cov - val * np.outer(vec, vec)
    return np.array(comps), np.array(vals)


def lineage_representations(model: SiameseModel, windows, n_lineages: int | None = None) -> np.ndarray:
    """Mean-pooled encodings, shape ``(n_windows, n_lineages, D)``."""
    n = n_lineages if n_lineages is not None else model.config.n_lineages + 1
    if not 1 <= n <= model.config.n_lineages + 1:
        raise ConfigError(f"n_lineages must lie in [1, {model.config.n_lineages + 1}]")
    x = instance_normalize(np.asarray(windows, dtype=np.float64))[0].astype(model.dtype)
    out = np.empty((len(x), n, model.config.d_model))
    with ag.no_grad():
        for i in range(n):
            h = model.represent(x, i).tokens.data
            out[:, i] = h.mean(axis=(1, 2))
    return out


def lineage_diversity_pca(model: SiameseModel, windows, n_lineages: int | None = None) -> list[tuple]:
    """Rows ``(window_id, lineage, pc1, pc2)`` for every window and lineage."""
    windows = np.asarray(windows)
    if windows.ndim != 3 or len(windows) < 2:
        raise ConfigError("need at least two windows of shape (T, C)")
    reps = lineage_representations(model, windows, n_lineages)
    flat = reps.reshape(-1, reps.shape[-1])
    comps, _ = principal_components(flat)
    coords = (flat - flat.mean(axis=0)) @ comps.T
    n = reps.shape[1]
    return [(i // n, i % n, float(c[0]), float(c[1])) for i, c in enumerate(coords)]


def write_pca_csv(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_id", "lineage", "pc1", "pc2"])
        for wid, lin, a, b in rows:
            w.writerow([wid, lin, repr(a), repr(b)])
