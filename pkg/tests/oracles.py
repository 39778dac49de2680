"""Independent reference implementations used as test oracles.

These are deliberately naive: plain Python recursion over one time index,
no numpy windows, no memoization.
"""

from __future__ import annotations

import math

import numpy as np

from stlswarm.stl import (
    And,
    Eventually,
    Globally,
    HalfPlanePredicate,
    Implies,
    Not,
    Or,
    Predicate,
    RegionPredicate,
    Until,
    VisitCountPredicate,
)


def _pred_value(fn, tau, t):
    x, y = float(tau[t][0]), float(tau[t][1])
    if isinstance(fn, RegionPredicate):
        return fn.radius - (abs(x - fn.center[0]) + abs(y - fn.center[1]))
    if isinstance(fn, HalfPlanePredicate):
        return fn.normal[0] * x + fn.normal[1] * y - fn.offset
    if isinstance(fn, VisitCountPredicate):
        visits, was_in = 0, False
        for s in range(t + 1):
            r = fn.region
            now_in = r.radius - (abs(tau[s][0] - r.center[0]) + abs(tau[s][1] - r.center[1])) >= 0
            if now_in and not was_in:
                visits += 1
            was_in = now_in
        return 1.0 if visits >= fn.count else -1.0
    raise TypeError(fn)


def naive_rho(f, tau, t=0):
    if isinstance(f, Predicate):
        return _pred_value(f.fn, tau, t)
    if isinstance(f, Not):
        return -naive_rho(f.f, tau, t)
    if isinstance(f, Implies):
        return max(-naive_rho(f.f, tau, t), naive_rho(f.g, tau, t))
    if isinstance(f, And):
        return min(naive_rho(c, tau, t) for c in f.fs)
    if isinstance(f, Or):
        return max(naive_rho(c, tau, t) for c in f.fs)
    if isinstance(f, Eventually):
        return max(naive_rho(f.f, tau, s) for s in range(t + f.a, t + f.b + 1))
    if isinstance(f, Globally):
        return min(naive_rho(f.f, tau, s) for s in range(t + f.a, t + f.b + 1))
    if isinstance(f, Until):
        best = -math.inf
        for t1 in range(t + f.a, t + f.b + 1):
            v = naive_rho(f.g, tau, t1)
            for t2 in range(t, t1 + 1):
                v = min(v, naive_rho(f.f, tau, t2))
            best = max(best, v)
        return best
    raise TypeError(f)


def naive_sat(f, tau, t=0) -> bool:
    """Boolean semantics, evaluated without any robustness arithmetic."""
    if isinstance(f, Predicate):
        return _pred_value(f.fn, tau, t) >= 0
    if isinstance(f, Not):
        return not naive_sat(f.f, tau, t)
    if isinstance(f, Implies):
        return (not naive_sat(f.f, tau, t)) or naive_sat(f.g, tau, t)
    if isinstance(f, And):
        return all(naive_sat(c, tau, t) for c in f.fs)
    if isinstance(f, Or):
        return any(naive_sat(c, tau, t) for c in f.fs)
    if isinstance(f, Eventually):
        return any(naive_sat(f.f, tau, s) for s in range(t + f.a, t + f.b + 1))
    if isinstance(f, Globally):
        return all(naive_sat(f.f, tau, s) for s in range(t + f.a, t + f.b + 1))
    if isinstance(f, Until):
        return any(
            naive_sat(f.g, tau, t1) and all(naive_sat(f.f, tau, t2) for t2 in range(t, t1 + 1))
            for t1 in range(t + f.a, t + f.b + 1)
        )
    raise TypeError(f)


# -- random generators -------------------------------------------------------------

ATOMS = [
    RegionPredicate((0.0, 0.0), 1.0, "A"),
    RegionPredicate((2.0, 2.0), 1.0, "B"),
    RegionPredicate((2.0, 0.0), 1.0, "C"),
    HalfPlanePredicate((1.0, 0.0), 0.5, "X"),
    HalfPlanePredicate((0.0, 1.0), -0.5, "Y"),
]


def random_formula(rng: np.random.Generator, depth: int, budget: int):
    """Random formula of depth <= ``depth`` whose horizon is <= ``budget``."""
    if depth <= 1 or rng.random() < 0.2:
        return Predicate(ATOMS[rng.integers(len(ATOMS))])
    kind = rng.integers(7)
    if kind == 0:
        return Not(random_formula(rng, depth - 1, budget))
    if kind in (1, 2):
        n = int(rng.integers(2, 4))
        fs = tuple(random_formula(rng, depth - 1, budget) for _ in range(n))
        return And(fs) if kind == 1 else Or(fs)
    if kind == 3:
        return Implies(random_formula(rng, depth - 1, budget), random_formula(rng, depth - 1, budget))
    b = int(rng.integers(0, budget + 1))
    a = int(rng.integers(0, b + 1))
    rest = budget - b
    if kind == 6:
        return Until(a, b, random_formula(rng, depth - 1, rest), random_formula(rng, depth - 1, rest))
    child = random_formula(rng, depth - 1, rest)
    return Eventually(a, b, child) if kind == 4 else Globally(a, b, child)


def random_case(rng: np.random.Generator, max_depth: int = 3, max_len: int = 12):
    L = int(rng.integers(1, max_len + 1))
    f = random_formula(rng, int(rng.integers(1, max_depth + 1)), L - 1)
    tau = rng.uniform(-1.5, 3.5, size=(L, 2))
    return f, tau


def brute_force_min_distance(states) -> float:
    p = np.asarray(states)[:, :2]
    best = math.inf
    for i in range(len(p)):
        for j in range(i + 1, len(p)):
            best = min(best, math.hypot(p[i, 0] - p[j, 0], p[i, 1] - p[j, 1]))
    return best


def ray_march(origin, angle, obstacles, R, step=1e-3) -> float:
    """Walk along a ray in ``step`` increments until inside an obstacle."""
    ox, oy = origin
    c, s = math.cos(angle), math.sin(angle)
    n = int(R / step)
    for i in range(n + 1):
        d = i * step
        x, y = ox + d * c, oy + d * s
        for cx, cy, r in obstacles:
            if (x - cx) ** 2 + (y - cy) ** 2 <= r * r:
                return d
    return R
