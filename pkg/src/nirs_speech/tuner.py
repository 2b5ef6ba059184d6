"""Leave-one-out selection of the RLDA regularization parameter.

Grid values are integer twentieths (0, 0.05, ..., 1). Within a session the
upper bound is the previously selected gamma; the first training of the
second session searches [0.3, 1] instead. Ties go to the largest gamma.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .classifier import DEFAULT_LOADING, ClassifierError, class_statistics, decision_scores, train_from_stats
from .epoching import LabeledDataset

GRID_DENOMINATOR = 20
BASE_GRID = tuple(range(GRID_DENOMINATOR + 1))
SESSION2_MIN_GAMMA = 0.3


class TuningError(ValueError):
    pass


def to_twentieths(gamma: float) -> int:
    t = gamma * GRID_DENOMINATOR
    if abs(t - round(t)) > 1e-9 or not 0 <= round(t) <= GRID_DENOMINATOR:
        raise TuningError(f"gamma {gamma} is not on the 0.05 grid")
    return int(round(t))


def from_twentieths(t: int) -> float:
    return t / GRID_DENOMINATOR


@dataclass(frozen=True)
class GammaConstraints:
    session_index: int = 1
    first_training_of_session_2: bool = False
    previous_gamma: float | None = None

    def __post_init__(self):
        if self.previous_gamma is not None:
            to_twentieths(self.previous_gamma)

    def bounds(self) -> tuple[int, int]:
        """(lowest, highest) admissible gamma in twentieths."""
        if self.first_training_of_session_2:
            return to_twentieths(SESSION2_MIN_GAMMA), GRID_DENOMINATOR
        if self.previous_gamma is not None:
            return 0, to_twentieths(self.previous_gamma)
        return 0, GRID_DENOMINATOR


@dataclass(frozen=True)
class GammaGrid:
    twentieths: tuple[int, ...]

    def __post_init__(self):
        if not self.twentieths:
            raise TuningError("constrained gamma grid is empty")
        if any(b <= a for a, b in zip(self.twentieths, self.twentieths[1:])):
            raise TuningError("gamma grid must be strictly ascending")
        if not set(self.twentieths) <= set(BASE_GRID):
            raise TuningError("gamma grid must be a subset of the 0.05 base grid")

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(from_twentieths(t) for t in self.twentieths)

    @property
    def bounds(self) -> tuple[float, float]:
        return self.values[0], self.values[-1]


def constrained_grid(constraints: GammaConstraints) -> GammaGrid:
    lo, hi = constraints.bounds()
    return GammaGrid(tuple(t for t in BASE_GRID if lo <= t <= hi))


@dataclass(frozen=True)
class TuneOutcome:
    gammas: tuple[float, ...]
    accuracies: tuple[float, ...]
    gamma: float
    grid: GammaGrid
    constraints: GammaConstraints

    def rows(self) -> list[tuple[float, float, int]]:
        return [(g, a, int(g == self.gamma)) for g, a in zip(self.gammas, self.accuracies)]

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "bounds": list(self.grid.bounds),
            "table": [{"gamma": g, "loocv_accuracy": a} for g, a in zip(self.gammas, self.accuracies)],
        }


def _check_foldable(data: LabeledDataset) -> None:
    if data.N < data.K + 2:
        raise TuningError(f"LOOCV needs N >= K + 2 (N={data.N}, K={data.K})")


def loocv_table(data: LabeledDataset, gammas: Sequence[float], loading: float = DEFAULT_LOADING) -> np.ndarray:
    """LOOCV accuracy for each gamma.

    Statistics are recomputed from scratch for every fold and shared only
    across the gamma values of that fold.
    """
    _check_foldable(data)
    correct = np.zeros(len(gammas), dtype=int)
    for i in range(data.N):
        train = data.without(i)
        if train.classes != data.classes:
            raise TuningError(f"fold {i}: leaving out example {i} empties class {data.y[i]!r}")
        try:
            stats = class_statistics(train)
            for j, g in enumerate(gammas):
                model = train_from_stats(stats, g, loading)
                scores = decision_scores(model, data.X[i])[0]
                correct[j] += model.classes[int(np.argmax(scores))] == data.y[i]
        except ClassifierError as exc:
            raise TuningError(f"fold {i} is untrainable: {exc}") from exc
    return correct / data.N


def loocv_accuracy(data: LabeledDataset, gamma: float, loading: float = DEFAULT_LOADING) -> float:
    return float(loocv_table(data, [gamma], loading)[0])


def select_gamma(
    data: LabeledDataset,
    constraints: GammaConstraints = GammaConstraints(),
    loading: float = DEFAULT_LOADING,
) -> TuneOutcome:
    """Best LOOCV gamma over the constrained grid, largest gamma on ties."""
    grid = constrained_grid(constraints)
    acc = loocv_table(data, grid.values, loading)
    best = acc.max()
    chosen = max(g for g, a in zip(grid.values, acc) if a == best)
    return TuneOutcome(grid.values, tuple(float(a) for a in acc), chosen, grid, constraints)
