"""Accuracy matrices and the continual-learning summary metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError, UndefinedMetricError


@dataclass
class AccuracyMatrix:
    """Lower-triangular ``a[t][i]``: accuracy on task ``i`` after training task ``t`` (1-based)."""

    n_tasks: int
    rows: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ParameterError("an accuracy matrix needs at least one task")
        for t, row in enumerate(self.rows, start=1):
            self._check_row(t, row)

    @staticmethod
    def _check_row(t: int, row: Sequence[float]) -> None:
        if len(row) != t:
            raise ParameterError(f"row {t} must hold {t} entries, got {len(row)}")
        for v in row:
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"accuracy {v} outside [0, 1]")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        return cls(len(rows), [list(map(float, r)) for r in rows])

    def append_row(self, row: Sequence[float]) -> None:
        t = len(self.rows) + 1
        if t > self.n_tasks:
            raise ParameterError("matrix is already complete")
        row = [float(v) for v in row]
        self._check_row(t, row)
        self.rows.append(row)

    @property
    def complete(self) -> bool:
        return len(self.rows) == self.n_tasks

    def get(self, t: int, i: int) -> float:
        if not 1 <= i <= t <= len(self.rows):
            raise ParameterError(f"entry ({t}, {i}) does not exist")
        return self.rows[t - 1][i - 1]

    def to_array(self) -> np.ndarray:
        """Dense ``T x T`` array with NaN above the diagonal."""
        out = np.full((self.n_tasks, self.n_tasks), np.nan)
        for t, row in enumerate(self.rows):
            out[t, : t + 1] = row
        return out


def average_accuracy(m: AccuracyMatrix, t: int | None = None) -> float:
    """Mean of row ``t`` (default: the last filled row)."""
    t = len(m.rows) if t is None else t
    if not 1 <= t <= len(m.rows):
        raise ParameterError(f"t={t} outside 1..{len(m.rows)}")
    row = m.rows[t - 1]
    return math.fsum(row) / t


def average_forgetting(m: AccuracyMatrix) -> float:
    """Mean over tasks ``i < T`` of the best earlier accuracy minus the final one."""
    T = len(m.rows)
    if T < 2:
        raise UndefinedMetricError("forgetting needs at least two tasks")
    final = m.rows[T - 1]
    drops = [max(m.rows[t - 1][i - 1] for t in range(i, T)) - final[i - 1] for i in range(1, T)]
    return math.fsum(drops) / (T - 1)


def mean_and_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = [float(v) for v in values]
    if not values:
        raise ParameterError("no values to aggregate")
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)
