"""A small reverse-mode differentiation tape over numpy arrays.

Only the primitives needed by the registration objective are provided. Values
are float64 arrays; every primitive registers a forward function and a
vector-Jacobian product. Integer index arrays (gathers, scatters) and
frequencies are attributes of a node, never differentiated.

Example::

    tape = Tape()
    theta = tape.param(np.array([1.0, 2.0]))
    loss = (theta * theta).sum()
    grads = tape.backward(loss)      # {theta.id: array([2., 4.])}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class UnsupportedPrimitive(KeyError):
    pass


class TapeError(RuntimeError):
    pass


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class _Primitive:
    forward: Callable
    vjp: Callable  # (g, output value, input values, attrs) -> tuple of input cotangents


_PRIMITIVES: dict[str, _Primitive] = {}


def primitive(name: str):
    def deco(cls):
        _PRIMITIVES[name] = _Primitive(cls.forward, cls.vjp)
        return cls

    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@primitive("add")
class _Add:
    forward = staticmethod(lambda a, b: a + b)
    vjp = staticmethod(lambda g, y, xs, at: (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)))


@primitive("sub")
class _Sub:
    forward = staticmethod(lambda a, b: a - b)
    vjp = staticmethod(lambda g, y, xs, at: (_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)))


@primitive("mul")
class _Mul:
    forward = staticmethod(lambda a, b: a * b)
    vjp = staticmethod(
        lambda g, y, xs, at: (_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape))
    )


@primitive("div")
class _Div:
    forward = staticmethod(lambda a, b: a / b)
    vjp = staticmethod(
        lambda g, y, xs, at: (
            _unbroadcast(g / xs[1], xs[0].shape),
            _unbroadcast(-g * y / xs[1], xs[1].shape),
        )
    )


@primitive("scale")
class _Scale:
    """Multiply by a constant scalar ``c``."""

    forward = staticmethod(lambda a, c: c * a)
    vjp = staticmethod(lambda g, y, xs, at: (at["c"] * g,))


@primitive("add_const")
class _AddConst:
    forward = staticmethod(lambda a, c: a + c)
    vjp = staticmethod(lambda g, y, xs, at: (_unbroadcast(g, xs[0].shape),))


@primitive("affine")
class _Affine:
    """``x @ W + b`` with ``b`` broadcast over rows."""

    forward = staticmethod(lambda x, W, b: x @ W + b)
    vjp = staticmethod(lambda g, y, xs, at: (g @ xs[1].T, xs[0].T @ g, g.sum(axis=0)))


@primitive("matmul")
class _Matmul:
    forward = staticmethod(lambda a, b: a @ b)
    vjp = staticmethod(lambda g, y, xs, at: (g @ xs[1].T, xs[0].T @ g))


@primitive("relu")
class _Relu:
    forward = staticmethod(lambda a: np.maximum(a, 0.0))
    # subgradient 0 at the kink
    vjp = staticmethod(lambda g, y, xs, at: (g * (xs[0] > 0.0),))


@primitive("sin")
class _Sin:
    forward = staticmethod(lambda a, freq: np.sin(freq * a))
    vjp = staticmethod(lambda g, y, xs, at: (g * at["freq"] * np.cos(at["freq"] * xs[0]),))


@primitive("cos")
class _Cos:
    forward = staticmethod(lambda a, freq: np.cos(freq * a))
    vjp = staticmethod(lambda g, y, xs, at: (-g * at["freq"] * np.sin(at["freq"] * xs[0]),))


@primitive("abs")
class _Abs:
    forward = staticmethod(np.abs)
    vjp = staticmethod(lambda g, y, xs, at: (g * np.sign(xs[0]),))


@primitive("sqrt")
class _Sqrt:
    forward = staticmethod(np.sqrt)
    vjp = staticmethod(lambda g, y, xs, at: (np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0),))


@primitive("arccos")
class _Arccos:
    forward = staticmethod(lambda a: np.arccos(np.clip(a, -1.0, 1.0)))
    vjp = staticmethod(
        lambda g, y, xs, at: (-g / np.sqrt(np.maximum(1.0 - xs[0] ** 2, 1e-300)),)
    )


@primitive("sum")
class _Sum:
    forward = staticmethod(lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims))

    @staticmethod
    def vjp(g, y, xs, at):
        axis, keep = at["axis"], at["keepdims"]
        if axis is not None and not keep:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xs[0].shape).copy(),)


@primitive("sqnorm")
class _SqNorm:
    """Sum of squares of all entries (squared Frobenius / L2 norm)."""

    forward = staticmethod(lambda a: np.asarray(np.sum(a * a)))
    vjp = staticmethod(lambda g, y, xs, at: (2.0 * g * xs[0],))


@primitive("rownorm")
class _RowNorm:
    """Euclidean norm of every row; the derivative at a zero row is taken as 0."""

    forward = staticmethod(lambda a: np.sqrt(np.sum(a * a, axis=1)))

    @staticmethod
    def vjp(g, y, xs, at):
        safe = np.where(y > 0, y, 1.0)
        return ((np.where(y > 0, g / safe, 0.0))[:, None] * xs[0],)


@primitive("rowdot")
class _RowDot:
    forward = staticmethod(lambda a, b: np.einsum("ij,ij->i", a, b))
    vjp = staticmethod(lambda g, y, xs, at: (g[:, None] * xs[1], g[:, None] * xs[0]))


@primitive("cross")
class _Cross:
    forward = staticmethod(lambda a, b: np.cross(a, b))
    vjp = staticmethod(lambda g, y, xs, at: (np.cross(xs[1], g), np.cross(g, xs[0])))


@primitive("concat")
class _Concat:
    """Concatenate along columns."""

    forward = staticmethod(lambda *arrs: np.concatenate(arrs, axis=1))

    @staticmethod
    def vjp(g, y, xs, at):
        cuts = np.cumsum([x.shape[1] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=1))


@primitive("vstack")
class _VStack:
    forward = staticmethod(lambda *arrs: np.concatenate(arrs, axis=0))

    @staticmethod
    def vjp(g, y, xs, at):
        cuts = np.cumsum([x.shape[0] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=0))


@primitive("col")
class _Col:
    """Length-n vector to an (n, 1) column."""

    forward = staticmethod(lambda a: a[:, None])
    vjp = staticmethod(lambda g, y, xs, at: (g[:, 0],))


@primitive("gather")
class _Gather:
    """Fixed-index row gather ``a[idx]``; indices are constants of the backward pass."""

    forward = staticmethod(lambda a, idx: a[idx])

    @staticmethod
    def vjp(g, y, xs, at):
        out = np.zeros_like(xs[0])
        np.add.at(out, at["idx"], g)
        return (out,)


@primitive("scatter_add")
class _ScatterAdd:
    """Rows of ``a`` accumulated into ``n`` output rows at positions ``idx``."""

    @staticmethod
    def forward(a, idx, n):
        out = np.zeros((n,) + a.shape[1:], dtype=np.float64)
        np.add.at(out, idx, a)
        return out

    vjp = staticmethod(lambda g, y, xs, at: (g[at["idx"]],))


class Tape:
    """Append-only record of primitive applications; node ids are list positions,
    so inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def _push(self, kind, inputs, value, attrs=None) -> "Var":
        self.nodes.append(_Node(kind, tuple(inputs), value, attrs or {}))
        return Var(self, len(self.nodes) - 1)

    def param(self, value) -> "Var":
        return self._push("param", (), np.array(value, dtype=np.float64))

    def const(self, value) -> "Var":
        return self._push("const", (), np.array(value, dtype=np.float64))

    def apply(self, kind: str, *inputs: "Var", **attrs) -> "Var":
        try:
            prim = _PRIMITIVES[kind]
        except KeyError:
            raise UnsupportedPrimitive(f"unsupported primitive {kind!r}") from None
        for v in inputs:
            if v.tape is not self:
                raise TapeError("input belongs to a different tape")
        vals = [self.nodes[v.id].value for v in inputs]
        out = np.asarray(prim.forward(*vals, **attrs), dtype=np.float64)
        return self._push(kind, [v.id for v in inputs], out, attrs)

    def value(self, v: "Var") -> np.ndarray:
        return self.nodes[v.id].value

    def backward(self, loss: "Var") -> dict[int, np.ndarray]:
        """Cotangents of a scalar ``loss`` with respect to every ``param`` leaf."""
        if loss.tape is not self or loss.id >= len(self.nodes):
            raise TapeError("backward called before the loss was recorded on this tape")
        lv = self.nodes[loss.id].value
        if lv.size != 1:
            raise TapeError("backward needs a scalar loss")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(lv)}
        for nid in range(loss.id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.kind == "param":
                grads[nid] = g  # keep; popped entries are re-inserted for leaves
                continue
            if node.kind == "const":
                continue
            xs = [self.nodes[i].value for i in node.inputs]
            cots = _PRIMITIVES[node.kind].vjp(g, node.value, xs, node.attrs)
            for i, c in zip(node.inputs, cots):
                if self.nodes[i].kind == "const":
                    continue
                if i in grads:
                    grads[i] = grads[i] + c
                else:
                    grads[i] = np.asarray(c, dtype=np.float64)
        return {i: g for i, g in grads.items() if self.nodes[i].kind == "param"}


@dataclass(frozen=True)
class Var:
    """Handle to a node on a :class:`Tape`."""

    tape: Tape
    id: int

    # make ``ndarray - Var`` dispatch to the reflected Var operators
    __array_ufunc__ = None

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _lift(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        if not isinstance(other, Var):
            return self.tape.apply("add_const", self, c=np.asarray(other, dtype=np.float64))
        return self.tape.apply("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Var):
            return self.tape.apply("add_const", self, c=-np.asarray(other, dtype=np.float64))
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, c=1.0 / float(other))
        return self.tape.apply("div", self, self._lift(other))

    def __neg__(self):
        return self.tape.apply("scale", self, c=-1.0)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def __getitem__(self, idx):
        return self.tape.apply("gather", self, idx=np.asarray(idx, dtype=np.int64))


# functional spellings


def affine(x: Var, W: Var, b: Var) -> Var:
    return x.tape.apply("affine", x, W, b)


def relu(x: Var) -> Var:
    return x.tape.apply("relu", x)


def sin(x: Var, freq: float = 1.0) -> Var:
    return x.tape.apply("sin", x, freq=float(freq))


def cos(x: Var, freq: float = 1.0) -> Var:
    return x.tape.apply("cos", x, freq=float(freq))


def absolute(x: Var) -> Var:
    return x.tape.apply("abs", x)


def sqrt(x: Var) -> Var:
    return x.tape.apply("sqrt", x)


def arccos(x: Var) -> Var:
    return x.tape.apply("arccos", x)


def sqnorm(x: Var) -> Var:
    return x.tape.apply("sqnorm", x)


def rownorm(x: Var) -> Var:
    return x.tape.apply("rownorm", x)


def rowdot(a: Var, b) -> Var:
    return a.tape.apply("rowdot", a, a._lift(b))


def cross(a: Var, b: Var) -> Var:
    return a.tape.apply("cross", a, b)


def concat(parts: list[Var]) -> Var:
    return parts[0].tape.apply("concat", *parts)


def vstack(parts: list[Var]) -> Var:
    return parts[0].tape.apply("vstack", *parts)


def col(x: Var) -> Var:
    return x.tape.apply("col", x)


def gather(x: Var, idx) -> Var:
    return x.tape.apply("gather", x, idx=np.asarray(idx, dtype=np.int64))


def scatter_add(x: Var, idx, n: int) -> Var:
    return x.tape.apply("scatter_add", x, idx=np.asarray(idx, dtype=np.int64), n=int(n))
