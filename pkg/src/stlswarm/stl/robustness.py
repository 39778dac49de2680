"""Quantitative STL semantics: exact (numpy) and smooth (autodiff tape)."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import autodiff as ad
from .formula import (
    And,
    Eventually,
    Formula,
    Globally,
    HalfPlanePredicate,
    Implies,
    Not,
    Or,
    Predicate,
    RegionPredicate,
    Until,
)

DEFAULT_TEMP = 10.0
L1_EPS = 1e-6


class HorizonError(ValueError):
    """The signal is too short for the formula's temporal horizon."""


def _check_horizon(f: Formula, length: int, t: int) -> None:
    need = t + f.horizon()
    if t < 0 or need > length - 1:
        raise HorizonError(
            f"horizon: formula needs steps up to {need}, signal has {length} steps (t={t})"
        )


def robustness_trace(f: Formula, positions: np.ndarray) -> np.ndarray:
    """Exact robustness at every instant where ``f`` is fully defined.

    ``positions`` has time on axis 0 and a trailing coordinate axis of size 2;
    any axes in between are batch axes. The result has shape
    ``(L - f.horizon(), *batch)``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    return _trace(f, positions, {})


def _trace(f: Formula, pos: np.ndarray, memo: dict) -> np.ndarray:
    key = id(f)
    hit = memo.get(key)
    if hit is not None:
        return hit[1]
    out = _trace_node(f, pos, memo)
    memo[key] = (f, out)  # keep f alive so its id stays unique
    return out


def _windows(x: np.ndarray, a: int, b: int, n: int) -> np.ndarray:
    # windows[t, ..., j] = x[t + a + j]  for j in [0, b - a]
    return np.moveaxis(sliding_window_view(x[a:], b - a + 1, axis=0), -1, 1)[:n]


def _trace_node(f: Formula, pos: np.ndarray, memo: dict) -> np.ndarray:
    L = pos.shape[0]
    n = L - f.horizon()
    if isinstance(f, Predicate):
        return f.fn.values(pos)
    if isinstance(f, Not):
        return -_trace(f.f, pos, memo)
    if isinstance(f, Implies):
        return _trace(f.lowered(), pos, memo)
    if isinstance(f, (And, Or)):
        parts = [_trace(c, pos, memo)[:n] for c in f.fs]
        return np.min(parts, axis=0) if isinstance(f, And) else np.max(parts, axis=0)
    if isinstance(f, (Eventually, Globally)):
        w = _windows(_trace(f.f, pos, memo), f.a, f.b, n)
        return w.max(axis=1) if isinstance(f, Eventually) else w.min(axis=1)
    if isinstance(f, Until):
        lf = _trace(f.f, pos, memo)
        lg = _trace(f.g, pos, memo)
        fw = _windows(lf, 0, f.b, n)  # f over [t, t+b]
        gw = _windows(lg, 0, f.b, n)
        prefix_min = np.minimum.accumulate(fw, axis=1)
        cand = np.minimum(gw, prefix_min)[:, f.a :]
        return cand.max(axis=1)
    raise TypeError(f"unknown formula node {type(f).__name__}")


def robustness_exact(f: Formula, tau: np.ndarray, t: int = 0) -> float:
    """Exact robustness of ``f`` on position sequence ``tau`` (shape (L, 2)) at step ``t``."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim != 2 or tau.shape[1] != 2:
        raise ValueError(f"tau must have shape (L, 2), got {tau.shape}")
    _check_horizon(f, tau.shape[0], t)
    return float(robustness_trace(f, tau)[t])


def robustness_batch(f: Formula, tau: np.ndarray, t: int = 0) -> np.ndarray:
    """Exact robustness for a batch of signals shaped (L, B, 2)."""
    tau = np.asarray(tau, dtype=np.float64)
    _check_horizon(f, tau.shape[0], t)
    return robustness_trace(f, tau)[t]


def boolean_sat(f: Formula, tau: np.ndarray, t: int = 0) -> bool:
    """True iff the exact robustness is >= 0 (a tie at zero counts as satisfied)."""
    return robustness_exact(f, tau, t) >= 0.0


# -- smooth semantics -----------------------------------------------------------


def _as_var_sequence(tau, tape: ad.Tape | None) -> tuple[list[ad.Var], ad.Tape]:
    if isinstance(tau, ad.Var):
        raise TypeError("pass a sequence of per-step Vars, not one Var")
    if isinstance(tau, np.ndarray):
        tape = tape or ad.Tape()
        arr = tau if tau.ndim == 3 else tau[:, None, :]
        return [tape.const(arr[i]) for i in range(arr.shape[0])], tape
    seq = list(tau)
    if seq and isinstance(seq[0], ad.Var):
        return seq, seq[0].tape
    tape = tape or ad.Tape()
    return [tape.const(np.atleast_2d(p)) for p in seq], tape


class _SmoothEval:
    def __init__(self, tau: list[ad.Var], temp: float, eps: float):
        self.tau = tau
        self.temp = temp
        self.eps = eps
        self.tape = tau[0].tape
        self.rows = tau[0].shape[0]
        self.memo: dict = {}
        self._pred_cache: dict = {}

    def pred(self, p: Predicate, t: int) -> ad.Var:
        fn = p.fn
        if isinstance(fn, RegionPredicate):
            d = ad.l1_norm_smooth(self.tau[t] - np.asarray(fn.center)[None, :], self.eps, axis=1)
            return fn.radius - d
        if isinstance(fn, HalfPlanePredicate):
            return self.tau[t] @ np.asarray(fn.normal).reshape(2, 1) - fn.offset
        # derived channels (visit counters) are constants on the tape
        key = id(p)
        if key not in self._pred_cache:
            vals = np.stack([v.value for v in self.tau])  # (L, rows, 2)
            self._pred_cache[key] = (p, fn.values(vals))
        return self.tape.const(self._pred_cache[key][1][t].reshape(-1, 1))

    def smax(self, vs: Sequence[ad.Var]) -> ad.Var:
        if len(vs) == 1:
            return vs[0]
        return ad.logsumexp(ad.concat(list(vs), axis=1), axis=1, temp=self.temp)

    def smin(self, vs: Sequence[ad.Var]) -> ad.Var:
        if len(vs) == 1:
            return vs[0]
        return -ad.logsumexp(-ad.concat(list(vs), axis=1), axis=1, temp=self.temp)

    def __call__(self, f: Formula, t: int) -> ad.Var:
        key = (id(f), t)
        hit = self.memo.get(key)
        if hit is not None:
            return hit[1]
        out = self._eval(f, t)
        self.memo[key] = (f, out)
        return out

    def _eval(self, f: Formula, t: int) -> ad.Var:
        if isinstance(f, Predicate):
            return self.pred(f, t)
        if isinstance(f, Not):
            return -self(f.f, t)
        if isinstance(f, Implies):
            return self(f.lowered(), t)
        if isinstance(f, And):
            return self.smin([self(c, t) for c in f.fs])
        if isinstance(f, Or):
            return self.smax([self(c, t) for c in f.fs])
        if isinstance(f, Eventually):
            return self.smax([self(f.f, s) for s in range(t + f.a, t + f.b + 1)])
        if isinstance(f, Globally):
            return self.smin([self(f.f, s) for s in range(t + f.a, t + f.b + 1)])
        if isinstance(f, Until):
            outer = []
            for s in range(t + f.a, t + f.b + 1):
                inner = [self(f.g, s)] + [self(f.f, u) for u in range(t, s + 1)]
                outer.append(self.smin(inner))
            return self.smax(outer)
        raise TypeError(f"unknown formula node {type(f).__name__}")


def robustness_smooth(
    f: Formula,
    tau,
    t: int = 0,
    temp: float = DEFAULT_TEMP,
    eps: float = L1_EPS,
    tape: ad.Tape | None = None,
) -> ad.Var:
    """Smooth robustness as a Var of shape (rows, 1).

    ``tau`` is a sequence of per-step Vars shaped (rows, 2), so a batch of
    signals is evaluated at once; numpy input of shape (L, 2) or (L, rows, 2)
    is wrapped as constants. min/max are replaced by temperature-scaled
    logsumexp, and region distances use the smoothed L1 norm.
    """
    if temp <= 0:
        raise ValueError("temp must be positive")
    seq, tape = _as_var_sequence(tau, tape)
    _check_horizon(f, len(seq), t)
    return _SmoothEval(seq, temp, eps)(f, t)


def smooth_gap_bound(f: Formula, temp: float) -> float:
    """Upper bound on |smooth - exact| from per-reduction logsumexp error."""
    return f.depth() * np.log(f.max_reduction()) / temp
