"""Accuracy matrix and the continual-learning metrics derived from it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """``R[i, j]``: accuracy on test set ``j`` after training through task ``i``.

    Only the lower triangle (``j <= i``) is defined; the rest is NaN.
    ``correct`` keeps the raw counts so micro averages are exact.
    """

    R: np.ndarray
    correct: np.ndarray
    test_sizes: np.ndarray

    @classmethod
    def empty(cls, test_sizes: Sequence[int]) -> "AccuracyMatrix":
        n = len(test_sizes)
        return cls(np.full((n, n), np.nan), np.full((n, n), -1, dtype=np.int64),
                   np.asarray(test_sizes, dtype=np.int64))

    @property
    def num_tasks(self) -> int:
        return len(self.test_sizes)

    def record(self, i: int, j: int, correct: int) -> None:
        if j > i:
            raise MetricError(f"R[{i}][{j}] is above the diagonal")
        self.correct[i, j] = correct
        self.R[i, j] = correct / self.test_sizes[j]

    def row_average(self, i: int) -> float:
        """Micro-averaged accuracy over test sets 0..i after task i."""
        return float(self.correct[i, : i + 1].sum() / self.test_sizes[: i + 1].sum())


def average_accuracy(predictions: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> float:
    """Micro average: total correct over total test samples, across all test sets."""
    total = sum(len(y) for y in labels)
    if total == 0:
        raise MetricError("no test samples")
    correct = sum(int((np.asarray(p) == np.asarray(y)).sum()) for p, y in zip(predictions, labels))
    return correct / total


def _check_square(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise MetricError(f"R must be square, got {R.shape}")
    if R.shape[0] < 2:
        raise MetricError("needs at least two tasks")
    return R


def forgetting(R) -> float:
    """Mean over old tasks of (best accuracy ever reached) − (final accuracy)."""
    R = _check_square(R)
    T = R.shape[0]
    drops = [R[t:, t].max() - R[T - 1, t] for t in range(T - 1)]
    return float(np.mean(drops))


def backward_transfer(R) -> float:
    """Mean over old tasks of (final accuracy) − (accuracy right after learning it)."""
    R = _check_square(R)
    T = R.shape[0]
    return float(np.mean([R[T - 1, t] - R[t, t] for t in range(T - 1)]))


@dataclass
class ConditionalAccuracy:
    overall: float
    right_expert: float | None
    wrong_expert: float | None
    n_right: int
    n_wrong: int


def conditional_accuracy(predictions, labels, selected, true_task) -> ConditionalAccuracy:
    """Accuracy split by whether the routed expert was the sample's own dataset.

    An empty partition reports ``None``.
    """
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    hit = np.asarray(selected) == np.asarray(true_task)
    correct = predictions == labels
    if correct.size == 0:
        raise MetricError("no test samples")

    def frac(m):
        return float(correct[m].mean()) if m.any() else None

    return ConditionalAccuracy(float(correct.mean()), frac(hit), frac(~hit),
                               int(hit.sum()), int((~hit).sum()))
