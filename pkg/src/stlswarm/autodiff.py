"""Minimal reverse-mode automatic differentiation over dense 2-D arrays.

Every value on a :class:`Tape` is a float64 matrix of shape ``(rows, cols)``.
Operations evaluate eagerly and register a backward rule; :meth:`Tape.backward`
walks the tape in reverse insertion order exactly once.

Gradients accumulate across repeated ``backward`` calls on the same tape until
:meth:`Tape.zero_grad` is called.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_tape_ids = itertools.count()


class ShapeError(ValueError):
    pass


class TapeError(ValueError):
    pass


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


@dataclass
class _Node:
    value: np.ndarray
    parents: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None
    name: str | None = None


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self) -> None:
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []
        self.grads: list[np.ndarray | None] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, value, parents=(), backward=None, name=None) -> "Var":
        self.nodes.append(_Node(value, tuple(parents), backward, name))
        self.grads.append(None)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> "Var":
        """Register a differentiable input."""
        return self._push(_as_matrix(value).copy(), name=name)

    def const(self, value) -> "Var":
        """A value that takes part in computation but is not a gradient target."""
        return self._push(_as_matrix(value).copy(), name="<const>")

    def leaves(self) -> list["Var"]:
        return [
            Var(self, i)
            for i, n in enumerate(self.nodes)
            if not n.parents and n.name != "<const>"
        ]

    def zero_grad(self) -> None:
        self.grads = [None] * len(self.nodes)

    def backward(self, loss: "Var") -> dict["Var", np.ndarray]:
        """Back-propagate from a scalar ``loss``.

        Returns a map from every leaf on the tape to its accumulated gradient;
        leaves that ``loss`` does not depend on map to zeros.
        """
        if loss.tape is not self:
            raise TapeError("loss belongs to a different tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        adj: dict[int, np.ndarray] = {loss.index: np.ones((1, 1))}
        for i in range(loss.index, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            if self.grads[i] is None:
                self.grads[i] = g.copy()
            else:
                self.grads[i] = self.grads[i] + g
            if node.backward is None:
                continue
            for p, gp in zip(node.parents, node.backward(g)):
                if gp is None:
                    continue
                if p in adj:
                    adj[p] = adj[p] + gp
                else:
                    adj[p] = gp

        return {v: self.grad(v) for v in self.leaves()}

    def grad(self, var: "Var") -> np.ndarray:
        g = self.grads[var.index]
        if g is None:
            return np.zeros(var.shape)
        return g


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        return self.tape.grad(self)

    def __hash__(self) -> int:
        return hash((self.tape.id, self.index))

    def __eq__(self, other) -> bool:
        return isinstance(other, Var) and other.tape is self.tape and other.index == self.index

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise TapeError("operands live on different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)


def _same_tape(*vs: Var) -> Tape:
    tape = vs[0].tape
    for v in vs[1:]:
        if v.tape is not tape:
            raise TapeError("operands live on different tapes")
    return tape


# -- primitives ---------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return tape._push(
        a.value + b.value,
        (a.index, b.index),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return tape._push(
        a.value - b.value,
        (a.index, b.index),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a: Var, b: Var) -> Var:
    """Elementwise product (row/column broadcasting allowed)."""
    tape = _same_tape(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return tape._push(
        av * bv,
        (a.index, b.index),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def matmul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return tape._push(av @ bv, (a.index, b.index), lambda g: (g @ bv.T, av.T @ g))


def scale(a: Var, c: float) -> Var:
    return a.tape._push(a.value * c, (a.index,), lambda g: (g * c,))


def sum(a: Var, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy
    av = a.value
    if axis is None:
        return a.tape._push(
            np.array([[av.sum()]]), (a.index,), lambda g: (np.full(av.shape, g[0, 0]),)
        )
    if axis not in (0, 1):
        raise ShapeError(f"sum: bad axis {axis}")
    out = av.sum(axis=axis, keepdims=True)
    return a.tape._push(out, (a.index,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape._push(a.value * mask, (a.index,), lambda g: (g * mask,))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape._push(y, (a.index,), lambda g: (g * (1.0 - y * y),))


def logsumexp(a: Var, axis: int | None = None, temp: float = 1.0) -> Var:
    """Smooth maximum ``(1/temp) * log(sum(exp(temp * x)))`` along ``axis``.

    Shifted by the maximum, so values up to 1e6 in magnitude with ``temp``
    up to 1e3 stay finite. A smooth minimum is ``-logsumexp(-x, ...)``.
    """
    if temp <= 0:
        raise ValueError("temp must be positive")
    av = a.value
    keep = axis is not None
    m = av.max(axis=axis, keepdims=True)
    z = np.exp(temp * (av - m))
    s = z.sum(axis=axis, keepdims=True)
    out = m + np.log(s) / temp
    w = z / s
    if not keep:
        out = out.reshape(1, 1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("logsumexp produced a non-finite value")
    return a.tape._push(out, (a.index,), lambda g: (w * g,) if keep else (w * g[0, 0],))


def smooth_max(a: Var, axis: int | None = None, temp: float = 1.0) -> Var:
    return logsumexp(a, axis=axis, temp=temp)


def smooth_min(a: Var, axis: int | None = None, temp: float = 1.0) -> Var:
    return scale(logsumexp(scale(a, -1.0), axis=axis, temp=temp), -1.0)


def l2_norm(a: Var, axis: int | None = None) -> Var:
    av = a.value
    if axis is None:
        n = np.sqrt((av * av).sum())
        out = np.array([[n]])
    else:
        out = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    d = np.where(out > 0, av / safe, 0.0)
    if axis is None:
        return a.tape._push(out, (a.index,), lambda g: (d * g[0, 0],))
    return a.tape._push(out, (a.index,), lambda g: (d * g,))


def l1_norm_smooth(a: Var, eps: float = 1e-6, axis: int | None = None) -> Var:
    """``sum(sqrt(x**2 + eps))`` along ``axis``: a differentiable stand-in for |x|_1.

    ``eps=0`` gives the exact L1 norm with subgradient 0 at kinks.
    """
    av = a.value
    if eps > 0:
        r = np.sqrt(av * av + eps)
        d = av / r
    else:
        r = np.abs(av)
        d = np.sign(av)
    out = r.sum(axis=axis, keepdims=axis is not None)
    if axis is None:
        out = np.array([[out]])
        return a.tape._push(out, (a.index,), lambda g: (d * g[0, 0],))
    return a.tape._push(out, (a.index,), lambda g: (d * g,))


def concat(vs: Sequence[Var], axis: int = 0) -> Var:
    if not vs:
        raise ShapeError("concat of nothing")
    tape = _same_tape(*vs)
    other = 1 - axis
    if any(v.shape[other] != vs[0].shape[other] for v in vs):
        raise ShapeError(f"concat along {axis}: {[v.shape for v in vs]}")
    sizes = [v.shape[axis] for v in vs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([v.value for v in vs], axis=axis)
    return tape._push(
        out, tuple(v.index for v in vs), lambda g: tuple(np.split(g, cuts, axis=axis))
    )


def slice(a: Var, rows=None, cols=None) -> Var:  # noqa: A001
    """Rectangular sub-block ``a[rows, cols]`` where each is a python slice or None."""
    rs = rows if rows is not None else np.s_[:]
    cs = cols if cols is not None else np.s_[:]
    if isinstance(rs, int) or isinstance(cs, int):
        raise ShapeError("slice takes python slices, not integers (keep 2-D)")
    av = a.value
    out = av[rs, cs]

    def back(g):
        full = np.zeros(av.shape)
        full[rs, cs] = g
        return (full,)

    return a.tape._push(out.copy(), (a.index,), back)


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad for {name} has shape {g.shape}, param {p.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        mhat = m / (1 - beta1**step)
        vhat = v / (1 - beta2**step)
        new_params[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step, new_m, new_v)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function (used by the gradient checks)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def leaves_from(tape: Tape, arrays: dict[str, np.ndarray]) -> dict[str, Var]:
    return {k: tape.leaf(v, name=k) for k, v in arrays.items()}


def grads_by_name(tape: Tape, leaves: dict[str, Var]) -> dict[str, np.ndarray]:
    return {k: tape.grad(v) for k, v in leaves.items()}


def stack_rows(vs: Iterable[Var]) -> Var:
    return concat(list(vs), axis=0)
