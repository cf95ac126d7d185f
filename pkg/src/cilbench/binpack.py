"""Online bin packing: the four heuristics, the Falkenauer score and winner labels."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numba
import numpy as np

DEFAULT_CAPACITY = 150
DEFAULT_LENGTH = 120
MIN_SIZE = 20
MAX_SIZE = 100


class Solver(IntEnum):
    """Heuristic ids. The integer value is the class label used everywhere."""

    BF = 0
    FF = 1
    NF = 2
    WF = 3


SOLVERS = tuple(Solver)


class PackingError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    id: str
    items: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(x) for x in self.items))

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class Packing:
    fills: tuple[int, ...]
    capacity: int
    # bin index chosen for each item, in arrival order
    placement: tuple[int, ...] = ()


def _items_of(instance) -> Sequence[int]:
    return instance.items if isinstance(instance, Instance) else instance


def _check(items: Sequence[int], capacity: int) -> None:
    if capacity <= 0:
        raise PackingError(f"capacity must be positive, got {capacity}")
    for i, s in enumerate(items):
        if s > capacity:
            raise PackingError(f"item {i} has size {s} > capacity {capacity}")
        if s <= 0:
            raise PackingError(f"item {i} has non-positive size {s}")


def _first_fit(items, capacity):
    fills: list[int] = []
    where: list[int] = []
    for s in items:
        for j, f in enumerate(fills):
            if f + s <= capacity:
                fills[j] = f + s
                where.append(j)
                break
        else:
            where.append(len(fills))
            fills.append(s)
    return fills, where


def _best_fit(items, capacity):
    fills: list[int] = []
    where: list[int] = []
    for s in items:
        best, best_res = -1, capacity + 1
        for j, f in enumerate(fills):
            res = capacity - f - s
            if 0 <= res < best_res:
                best, best_res = j, res
        if best < 0:
            where.append(len(fills))
            fills.append(s)
        else:
            where.append(best)
            fills[best] += s
    return fills, where


def _worst_fit(items, capacity):
    fills: list[int] = []
    where: list[int] = []
    for s in items:
        best, best_res = -1, -1
        for j, f in enumerate(fills):
            res = capacity - f - s
            if res > best_res:
                best, best_res = j, res
        if best < 0:
            where.append(len(fills))
            fills.append(s)
        else:
            where.append(best)
            fills[best] += s
    return fills, where


def _next_fit(items, capacity):
    fills: list[int] = []
    where: list[int] = []
    for s in items:
        if fills and fills[-1] + s <= capacity:
            fills[-1] += s
        else:
            fills.append(s)
        where.append(len(fills) - 1)
    return fills, where


_RULES = {
    Solver.BF: _best_fit,
    Solver.FF: _first_fit,
    Solver.NF: _next_fit,
    Solver.WF: _worst_fit,
}


def solve(solver, instance, capacity: int = DEFAULT_CAPACITY) -> Packing:
    """Pack ``instance`` online with ``solver``.

    Ties between equally good bins go to the lowest bin index.
    """
    items = _items_of(instance)
    _check(items, capacity)
    fills, where = _RULES[Solver(solver)](items, capacity)
    return Packing(tuple(fills), capacity, tuple(where))


def falkenauer(packing: Packing, k: float = 2) -> float:
    if not packing.fills:
        raise PackingError("cannot score an empty packing")
    c = packing.capacity
    total = 0.0
    for f in packing.fills:
        total += (f / c) ** k
    return total / len(packing.fills)


def score_all(instance, capacity: int = DEFAULT_CAPACITY, k: float = 2) -> dict[Solver, float]:
    items = _items_of(instance)
    _check(items, capacity)
    return {s: falkenauer(Packing(tuple(_RULES[s](items, capacity)[0]), capacity), k) for s in SOLVERS}


def winner_of(scores) -> Solver:
    """Argmax over scores; exact ties go to the lowest solver index."""
    vals = [scores[s] for s in SOLVERS] if isinstance(scores, dict) else list(scores)
    best = 0
    for i in range(1, 4):
        if vals[i] > vals[best]:
            best = i
    return Solver(best)


def label(instance, capacity: int = DEFAULT_CAPACITY, k: float = 2) -> tuple[Solver, dict[Solver, float]]:
    scores = score_all(instance, capacity, k)
    return winner_of(scores), scores


# -- compiled scorer used by the instance generators ----------------------------

@numba.njit(cache=True)
def _scores_kernel(items, capacity, k):
    n = items.shape[0]
    out = np.empty(4)
    fills = np.empty(n, np.int64)
    for rule in range(4):
        nb = 0
        for s in items:
            if rule == 2:
                if nb > 0 and fills[nb - 1] + s <= capacity:
                    fills[nb - 1] += s
                else:
                    fills[nb] = s
                    nb += 1
                continue
            best = -1
            if rule == 1:
                for j in range(nb):
                    if fills[j] + s <= capacity:
                        best = j
                        break
            elif rule == 0:
                best_res = capacity + 1
                for j in range(nb):
                    r = capacity - fills[j] - s
                    if r >= 0 and r < best_res:
                        best = j
                        best_res = r
            else:
                best_res = -1
                for j in range(nb):
                    r = capacity - fills[j] - s
                    if r > best_res:
                        best = j
                        best_res = r
            if best < 0:
                fills[nb] = s
                nb += 1
            else:
                fills[best] += s
        total = 0.0
        for j in range(nb):
            total += (fills[j] / capacity) ** k
        out[rule] = total / nb
    return out


def fast_scores(items, capacity: int = DEFAULT_CAPACITY, k: float = 2.0) -> np.ndarray:
    """All four Falkenauer scores in BF, FF, NF, WF order (compiled).

    No input validation; callers guarantee 0 < item <= capacity.
    """
    return _scores_kernel(np.asarray(items, dtype=np.int64), int(capacity), float(k))


def fast_margin(items, target: int, capacity: int = DEFAULT_CAPACITY, k: float = 2.0) -> float:
    """Target solver's score minus the best rival's."""
    s = fast_scores(items, capacity, k)
    own = s[target]
    s[target] = -np.inf
    return float(own - s.max())
