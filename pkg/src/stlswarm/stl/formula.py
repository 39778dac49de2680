"""STL abstract syntax and predicates over 2-D agent positions.

Temporal bounds are integer step indices on the waypoint timeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np


class BoundError(ValueError):
    """Raised for a temporal interval with a > b or a < 0."""


# -- predicates ---------------------------------------------------------------


@dataclass(frozen=True)
class RegionPredicate:
    """L1 ball: robustness is ``radius - |p - center|_1`` (positive inside)."""

    center: tuple[float, float]
    radius: float = 1.0
    name: str | None = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("region radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def values(self, positions: np.ndarray) -> np.ndarray:
        d = np.abs(positions - np.asarray(self.center)).sum(axis=-1)
        return self.radius - d

    def contains(self, positions: np.ndarray) -> np.ndarray:
        return self.values(positions) >= 0


@dataclass(frozen=True)
class HalfPlanePredicate:
    """``normal . p - offset`` (positive on the side the normal points to)."""

    normal: tuple[float, float]
    offset: float = 0.0
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "normal", tuple(float(c) for c in self.normal))

    def values(self, positions: np.ndarray) -> np.ndarray:
        return positions @ np.asarray(self.normal) - self.offset


@dataclass(frozen=True)
class VisitCountPredicate:
    """+1 once the signal has entered ``region`` at least ``count`` times, else -1.

    An entry is a step inside the region whose predecessor was outside; being
    inside at step 0 counts as the first entry. The channel is derived from
    the whole prefix of the signal and carries no gradient.
    """

    region: RegionPredicate
    count: int = 2
    name: str | None = None

    def values(self, positions: np.ndarray) -> np.ndarray:
        inside = self.region.contains(positions)
        entered = inside.copy()
        entered[1:] &= ~inside[:-1]
        visits = np.cumsum(entered, axis=0)
        return np.where(visits >= self.count, 1.0, -1.0)


PredicateFn = Union[RegionPredicate, HalfPlanePredicate, VisitCountPredicate]


# -- formulas -----------------------------------------------------------------


class Formula:
    """Base class; subclasses are immutable and hashable."""

    def children(self) -> tuple["Formula", ...]:
        return ()

    def horizon(self) -> int:
        """Number of future steps needed beyond the evaluation instant."""
        raise NotImplementedError

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children()), default=0)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children())

    def max_reduction(self) -> int:
        """Largest number of operands fed to any single min/max in this formula."""
        own = self._reduction_width()
        return max([own] + [c.max_reduction() for c in self.children()])

    def _reduction_width(self) -> int:
        return 1

    def predicates(self) -> list["Predicate"]:
        out: list[Predicate] = []
        for c in self.children():
            out.extend(c.predicates())
        return out

    def __and__(self, other: "Formula") -> "And":
        return And((self, other))

    def __or__(self, other: "Formula") -> "Or":
        return Or((self, other))

    def __invert__(self) -> "Not":
        return Not(self)


def _check_bounds(a: int, b: int) -> None:
    if a < 0:
        raise BoundError(f"temporal bound a={a} is negative")
    if a > b:
        raise BoundError(f"temporal bound a>b: [{a},{b}]")


@dataclass(frozen=True)
class Predicate(Formula):
    fn: PredicateFn

    @property
    def name(self) -> str:
        return self.fn.name or repr(self.fn)

    def horizon(self) -> int:
        return 0

    def predicates(self):
        return [self]


@dataclass(frozen=True)
class Not(Formula):
    f: Formula

    def children(self):
        return (self.f,)

    def horizon(self):
        return self.f.horizon()


@dataclass(frozen=True)
class And(Formula):
    fs: tuple[Formula, ...]

    def __post_init__(self):
        object.__setattr__(self, "fs", tuple(self.fs))
        if len(self.fs) < 2:
            raise ValueError("And needs at least two operands")

    def children(self):
        return self.fs

    def horizon(self):
        return max(f.horizon() for f in self.fs)

    def _reduction_width(self):
        return len(self.fs)


@dataclass(frozen=True)
class Or(Formula):
    fs: tuple[Formula, ...]

    def __post_init__(self):
        object.__setattr__(self, "fs", tuple(self.fs))
        if len(self.fs) < 2:
            raise ValueError("Or needs at least two operands")

    def children(self):
        return self.fs

    def horizon(self):
        return max(f.horizon() for f in self.fs)

    def _reduction_width(self):
        return len(self.fs)


@dataclass(frozen=True)
class Implies(Formula):
    f: Formula
    g: Formula

    def children(self):
        return (self.f, self.g)

    def horizon(self):
        return max(self.f.horizon(), self.g.horizon())

    def _reduction_width(self):
        return 2

    def lowered(self) -> Or:
        return Or((Not(self.f), self.g))


@dataclass(frozen=True)
class Eventually(Formula):
    a: int
    b: int
    f: Formula

    def __post_init__(self):
        _check_bounds(self.a, self.b)

    def children(self):
        return (self.f,)

    def horizon(self):
        return self.b + self.f.horizon()

    def _reduction_width(self):
        return self.b - self.a + 1


@dataclass(frozen=True)
class Globally(Formula):
    a: int
    b: int
    f: Formula

    def __post_init__(self):
        _check_bounds(self.a, self.b)

    def children(self):
        return (self.f,)

    def horizon(self):
        return self.b + self.f.horizon()

    def _reduction_width(self):
        return self.b - self.a + 1


@dataclass(frozen=True)
class Until(Formula):
    """``f U[a,b] g``: g holds at some t' in [t+a, t+b] and f holds on [t, t']."""

    a: int
    b: int
    f: Formula
    g: Formula

    def __post_init__(self):
        _check_bounds(self.a, self.b)

    def children(self):
        return (self.f, self.g)

    def horizon(self):
        return self.b + max(self.f.horizon(), self.g.horizon())

    def _reduction_width(self):
        # inner min over g(t') and f on [t, t'] has up to b + 2 operands
        return max(self.b - self.a + 1, self.b + 2)

    def depth(self):
        # two nested reductions
        return 2 + max(self.f.depth(), self.g.depth())


@dataclass
class SpecConfig:
    """A formula together with its plan length and goal sampling interval."""

    name: str
    formula: Formula
    plan_length: int
    sample_interval: int
    regions: dict[str, PredicateFn] = field(default_factory=dict)

    def __post_init__(self):
        if self.plan_length < 1 or self.sample_interval < 1:
            raise ValueError("plan_length and sample_interval must be >= 1")
        if self.formula.horizon() > self.plan_length:
            raise BoundError(
                f"formula horizon {self.formula.horizon()} exceeds plan length {self.plan_length}"
            )

    @property
    def eval_horizon(self) -> int:
        return 5 * self.sample_interval * self.plan_length

    # short aliases used throughout the code base
    @property
    def T(self) -> int:
        return self.plan_length

    @property
    def k(self) -> int:
        return self.sample_interval
