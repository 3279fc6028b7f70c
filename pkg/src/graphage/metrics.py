"""Evaluation criteria for age prediction, plus a ridge probe that
scores representation quality on frozen embeddings."""

from __future__ import annotations

import numpy as np

from .elm import elm_solve
from .errors import DataError, DomainError, ShapeError

__all__ = ["cumulative_score", "epsilon_error", "linear_probe", "mae"]


def _paired(true_ages, predictions) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(true_ages, dtype=np.float64).reshape(-1)
    y = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ShapeError("need at least one record")
    if x.shape != y.shape:
        raise ShapeError(f"{x.size} labels but {y.size} predictions")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("ages must be finite")
    return x, y


def mae(true_ages, predictions) -> float:
    """Mean absolute error in years."""
    x, y = _paired(true_ages, predictions)
    return float(np.abs(x - y).mean())


def cumulative_score(true_ages, predictions, within: float) -> float:
    """Percent of samples whose absolute error is <= within years."""
    if within < 0:
        raise DomainError(f"within must be >= 0, got {within}")
    x, y = _paired(true_ages, predictions)
    return float(100.0 * np.mean(np.abs(x - y) <= within))


def epsilon_error(predictions, mu, sigma) -> float:
    """Mean of 1 - exp(-(y - mu)^2 / (2 sigma^2)): 0 is best, 1 is worst.

    mu and sigma describe the per-sample annotator distribution.
    """
    y = np.asarray(predictions, dtype=np.float64).reshape(-1)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ShapeError("need at least one record")
    if not (y.shape == mu.shape == sigma.shape):
        raise ShapeError(f"shape mismatch: {y.shape}, {mu.shape}, {sigma.shape}")
    if np.any(sigma <= 0.0) or not np.all(np.isfinite(sigma)):
        raise DataError("sigma must be positive and finite")
    return float(np.mean(1.0 - np.exp(-((y - mu) ** 2) / (2.0 * sigma**2))))


def linear_probe(
    embeddings: np.ndarray,
    labels: np.ndarray,
    lam: float = 100.0,
    task: str = "regression",
    train_fraction: float = 0.8,
    seed: int = 0,
) -> float:
    """Ridge fit on a seeded split of frozen embeddings.

    Returns held-out MAE for regression or held-out accuracy (fraction
    correct) for classification. A cheap, deterministic stand-in for
    full fine-tuning when comparing representations.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"embeddings {x.shape} do not pair with {y.shape[0]} labels")
    n = x.shape[0]
    if n < 2:
        raise ShapeError("need at least 2 samples to split")
    if task not in ("regression", "classification"):
        raise DomainError(f"task must be regression or classification, got {task!r}")
    if not 0.0 < train_fraction < 1.0:
        raise DomainError(f"train_fraction must lie in (0, 1), got {train_fraction}")

    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    tr, te = order[:n_train], order[n_train:]
    design = np.concatenate([x, np.ones((n, 1))], axis=1)

    if task == "regression":
        w = elm_solve(design[tr], y[tr, None], lam)
        return mae(y[te], design[te] @ w[:, 0])

    classes = np.unique(y)
    if classes.size < 2:
        raise DataError("classification probe needs at least two classes")
    onehot = (y[tr, None] == classes[None, :]).astype(np.float64)
    w = elm_solve(design[tr], onehot, lam)
    picked = classes[np.argmax(design[te] @ w, axis=1)]
    return float(np.mean(picked == y[te]))
