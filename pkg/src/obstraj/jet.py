"""Nested forward-mode jets.

Two number types are provided:

* :class:`Grad` carries a value and its gradient with respect to a fixed set of
  seed directions. Values broadcast over a batch axis, so one pass evaluates many
  points at once (``value.shape == batch``, ``grad.shape == batch + (n,)``).
* :class:`Dual` is a first-order dual number ``re + du * eps`` whose parts may
  be floats, arrays, :class:`Grad` or lower-level :class:`Dual` values. Each
  ``Dual`` carries a nesting level; an operand of lower level is treated as a
  constant, which keeps independent perturbations from mixing.

Wrapping a ``Grad`` in ``k`` levels of ``Dual`` gives exact gradients of
``k``-th directional derivatives, which is how the Lie derivatives are built.
"""

from __future__ import annotations

import numpy as np


def level(x) -> int:
    if isinstance(x, Dual):
        return x.level
    if isinstance(x, Grad):
        return 0
    return -1


def primal(x):
    """Innermost value (float or array) of a jet."""
    while isinstance(x, Dual):
        x = x.re
    if isinstance(x, Grad):
        return x.value
    return x


class Grad:
    __slots__ = ("value", "grad")
    __array_ufunc__ = None

    def __init__(self, value, grad):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.asarray(grad, dtype=float)

    @classmethod
    def seed(cls, value, index: int, n: int) -> "Grad":
        value = np.asarray(value, dtype=float)
        grad = np.zeros(value.shape + (n,))
        grad[..., index] = 1.0
        return cls(value, grad)

    def __repr__(self):
        return f"Grad({self.value!r}, {self.grad!r})"

    def __neg__(self):
        return Grad(-self.value, -self.grad)

    def __pos__(self):
        return self

    def __add__(self, o):
        if isinstance(o, Grad):
            return Grad(self.value + o.value, self.grad + o.grad)
        if isinstance(o, Dual):
            return NotImplemented
        return Grad(self.value + o, self.grad)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Grad):
            return Grad(self.value - o.value, self.grad - o.grad)
        if isinstance(o, Dual):
            return NotImplemented
        return Grad(self.value - o, self.grad)

    def __rsub__(self, o):
        return Grad(o - self.value, -self.grad)

    def __mul__(self, o):
        if isinstance(o, Grad):
            return Grad(
                self.value * o.value,
                self.value[..., None] * o.grad + self.grad * o.value[..., None],
            )
        if isinstance(o, Dual):
            return NotImplemented
        o = np.asarray(o, dtype=float)
        return Grad(self.value * o, self.grad * o[..., None])

    __rmul__ = __mul__

    def reciprocal(self):
        r = 1.0 / self.value
        return Grad(r, -self.grad * (r * r)[..., None])

    def __truediv__(self, o):
        if isinstance(o, Dual):
            return NotImplemented
        if isinstance(o, Grad):
            return self * o.reciprocal()
        return self * (1.0 / np.asarray(o, dtype=float))

    def __rtruediv__(self, o):
        return self.reciprocal() * o

    def apply(self, fn, dfn):
        return Grad(fn(self.value), self.grad * dfn(self.value)[..., None])


class Dual:
    __slots__ = ("re", "du", "level")
    __array_ufunc__ = None

    def __init__(self, re, du, level: int):
        self.re = re
        self.du = du
        self.level = level

    def __repr__(self):
        return f"Dual[{self.level}]({self.re!r}, {self.du!r})"

    def _split(self, o):
        # returns (o.re, o.du) at this level, or None if o outranks self
        lo = level(o)
        if lo == self.level:
            return o.re, o.du
        if lo < self.level:
            return o, 0.0
        return None

    def __neg__(self):
        return Dual(-self.re, -self.du, self.level)

    def __pos__(self):
        return self

    def __add__(self, o):
        parts = self._split(o)
        if parts is None:
            return o.__radd__(self)
        return Dual(self.re + parts[0], self.du + parts[1], self.level)

    def __radd__(self, o):
        return Dual(o + self.re, self.du, self.level)

    def __sub__(self, o):
        parts = self._split(o)
        if parts is None:
            return o.__rsub__(self)
        return Dual(self.re - parts[0], self.du - parts[1], self.level)

    def __rsub__(self, o):
        return Dual(o - self.re, -self.du, self.level)

    def __mul__(self, o):
        lo = level(o)
        if lo == self.level:
            return Dual(self.re * o.re, self.re * o.du + self.du * o.re, self.level)
        if lo < self.level:
            return Dual(self.re * o, self.du * o, self.level)
        return o.__rmul__(self)

    def __rmul__(self, o):
        return Dual(o * self.re, o * self.du, self.level)

    def reciprocal(self):
        r = reciprocal(self.re)
        return Dual(r, -self.du * r * r, self.level)

    def __truediv__(self, o):
        lo = level(o)
        if lo < self.level:
            r = reciprocal(o)
            return Dual(self.re * r, self.du * r, self.level)
        if lo == self.level:
            return self * o.reciprocal()
        return o.__rtruediv__(self)

    def __rtruediv__(self, o):
        return self.reciprocal() * o


def reciprocal(x):
    if isinstance(x, (Dual, Grad)):
        return x.reciprocal()
    return 1.0 / np.asarray(x, dtype=float) if isinstance(x, np.ndarray) else 1.0 / x


def jsqrt(x):
    if isinstance(x, Dual):
        s = jsqrt(x.re)
        return Dual(s, x.du * (0.5 * reciprocal(s)), x.level)
    if isinstance(x, Grad):
        return x.apply(np.sqrt, lambda v: 0.5 / np.sqrt(v))
    return np.sqrt(x)


def jatan(x):
    if isinstance(x, Dual):
        return Dual(jatan(x.re), x.du * reciprocal(1.0 + x.re * x.re), x.level)
    if isinstance(x, Grad):
        return x.apply(np.arctan, lambda v: 1.0 / (1.0 + v * v))
    return np.arctan(x)


def tangent(x, lvl: int):
    """Derivative part of ``x`` at nesting level ``lvl`` (zero if ``x`` is constant there)."""
    if isinstance(x, Dual) and x.level == lvl:
        return x.du
    if level(x) > lvl:
        raise ValueError("jet of higher level than requested tangent")
    return 0.0


def gradient(x, batch_shape: tuple, n: int) -> np.ndarray:
    """Gradient array of a :class:`Grad` output (zeros for constants)."""
    if isinstance(x, Grad):
        return np.broadcast_to(x.grad, batch_shape + (n,)).copy()
    if isinstance(x, Dual):
        raise ValueError("unreduced Dual in gradient extraction")
    return np.zeros(batch_shape + (n,))


def value(x, batch_shape: tuple) -> np.ndarray:
    if isinstance(x, Grad):
        return np.broadcast_to(x.value, batch_shape).copy()
    return np.broadcast_to(np.asarray(primal(x), dtype=float), batch_shape).copy()
