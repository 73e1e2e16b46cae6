"""Right-continuous step functions over time.

Used for risk curves, baseline cumulative hazards, and censoring-survival
curves. Evaluation at t returns the value at the largest jump time <= t
(or the value at zero if t precedes every jump).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class StepFunction:
    jump_times: np.ndarray
    values: np.ndarray
    value_at_zero: float = 0.0

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if jt.ndim != 1 or vals.ndim != 1 or jt.size != vals.size:
            raise ValueError("jump_times and values must be 1-d and equal length")
        if jt.size and (np.any(jt <= 0) or np.any(np.diff(jt) <= 0)):
            raise ValueError("jump_times must be strictly increasing and positive")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "values", vals)

    def __call__(self, t):
        """Evaluate right-continuously at scalar or array t."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        padded = np.concatenate(([self.value_at_zero], self.values))
        out = padded[idx + 1]
        return float(out) if out.ndim == 0 else out

    def eval_left(self, t):
        """Evaluate at the left limit t-: value at the largest jump time < t."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="left") - 1
        padded = np.concatenate(([self.value_at_zero], self.values))
        out = padded[idx + 1]
        return float(out) if out.ndim == 0 else out

    @property
    def is_nondecreasing(self) -> bool:
        seq = np.concatenate(([self.value_at_zero], self.values))
        return bool(np.all(np.diff(seq) >= 0))


def from_increments(times, increments, value_at_zero: float = 0.0) -> StepFunction:
    """Build a cumulative step function from (possibly tied, unsorted) jumps.

    Tied times are merged by summing their increments.
    """
    times = np.asarray(times, dtype=float)
    increments = np.asarray(increments, dtype=float)
    if times.size == 0:
        return StepFunction(np.empty(0), np.empty(0), value_at_zero)
    order = np.argsort(times, kind="stable")
    times = times[order]
    increments = increments[order]
    uniq, start = np.unique(times, return_index=True)
    summed = np.add.reduceat(increments, start)
    return StepFunction(uniq, value_at_zero + np.cumsum(summed), value_at_zero)


def union_grid(*functions: StepFunction) -> np.ndarray:
    """Sorted union of the jump times of the given step functions."""
    if not functions:
        return np.empty(0)
    return np.unique(np.concatenate([f.jump_times for f in functions]))
