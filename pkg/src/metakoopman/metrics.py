"""Evaluation metrics."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np


def eigenvalue_error(estimated: Iterable, truth: Iterable) -> float:
    """Symmetric mean nearest-neighbour distance between two eigenvalue sets.

    Half of (mean over estimates of the distance to the closest true value)
    plus (mean over true values of the distance to the closest estimate).
    """
    est = np.array([complex(z) for z in estimated])
    tru = np.array([complex(z) for z in truth])
    if est.size == 0 or tru.size == 0:
        raise ValueError("eigenvalue_error: both eigenvalue lists must be non-empty")
    dist = np.abs(est[:, None] - tru[None, :])
    return 0.5 * (float(dist.min(axis=1).mean()) + float(dist.min(axis=0).mean()))


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"rmse: shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mean_se(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)); SE is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))
