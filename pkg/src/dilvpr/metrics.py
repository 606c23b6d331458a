"""Distance-bounded accuracy, the C1/C2/C3 criteria, and AP/BWT/FWT over a result matrix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from dilvpr.geo_grid import GridMap
from dilvpr.model import ModelParams, Sample, predict, stack_raw


class EmptySet(ValueError):
    pass


class Undefined(ValueError):
    """Metric is not defined for this many missions."""


def hits(params: ModelParams, samples: Sequence[Sample], grid: GridMap, tau: float) -> np.ndarray:
    """Per-sample correctness: predicted cell center strictly within ``tau`` of the ground truth."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not samples:
        return np.zeros(0, dtype=bool)
    pred = predict(params, stack_raw(samples))
    rows, cols = np.divmod(pred, grid.cols)
    cx = grid.origin[0] + (cols + 0.5) * grid.cell_size
    cy = grid.origin[1] + (rows + 0.5) * grid.cell_size
    gt = np.array([s.gt for s in samples], dtype=np.float64)
    return np.hypot(cx - gt[:, 0], cy - gt[:, 1]) < tau


def accuracy(params: ModelParams, eval_set: Sequence[Sample], grid: GridMap, tau: float = 300.0) -> float:
    if not eval_set:
        raise EmptySet("cannot evaluate on an empty set")
    return float(np.mean(hits(params, eval_set, grid, tau)))


def _check(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] < 1:
        raise ValueError(f"result matrix must be square and non-empty, got shape {R.shape}")
    return R


def ap(R) -> float:
    R = _check(R)
    return float(np.mean(R[-1]))


def bwt(R) -> float:
    R = _check(R)
    K = R.shape[0]
    if K < 2:
        raise Undefined("BWT needs at least two missions")
    return float(np.sum(R[-1, :-1] - np.diagonal(R)[:-1]) / (K - 1))


def fwt(R) -> float:
    R = _check(R)
    K = R.shape[0]
    if K < 2:
        raise Undefined("FWT needs at least two missions")
    return float(np.sum(R[np.arange(K - 1), np.arange(1, K)]) / (K - 1))


@dataclass
class CriteriaTrace:
    c1_per_step: List[Optional[float]]  # k = 0..K, None without unvisited data
    c2_per_step: List[float]  # k = 1..K
    c3_per_step: List[Optional[float]]  # k = 1..K, None at k = 1

    def summary(self):
        return criteria(self.c1_per_step, self.c2_per_step, self.c3_per_step)


def criteria(c1_trace, c2_trace, c3_trace):
    """``(C1, C2, C3)``: C1 and C3 at the final step, C2 averaged over all steps."""
    c1 = None if c1_trace[-1] is None else float(c1_trace[-1])
    c2 = float(np.mean(c2_trace))
    c3 = c3_trace[-1] if c3_trace else None
    return c1, c2, None if c3 is None else float(c3)


def optional(fn, R):
    try:
        return fn(R)
    except Undefined:
        return None
