"""Forward-mode automatic differentiation with dual numbers, and RMSProp.

A :class:`Dual` carries a value and its derivative with respect to a single
seeded parameter. Both components may be numpy arrays, so a whole sampled
kernel propagates as one dual object. The module-level functions
(:func:`exp`, :func:`log`, :func:`sqrt`, ...) accept duals, floats or arrays.
"""

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "Dual",
    "DualScalar",
    "seed",
    "value_of",
    "deriv_of",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "square",
    "sum",
    "RMSProp",
    "rmsprop_step",
]


class Dual:
    """Dual number ``value + deriv * eps`` with ``eps**2 == 0``."""

    __slots__ = ("value", "deriv")
    __array_ufunc__ = None  # ndarray <op> Dual defers to the reflected Dual method

    def __init__(self, value, deriv=0.0):
        self.value = value
        self.deriv = deriv

    def __repr__(self):
        return f"Dual({self.value!r}, {self.deriv!r})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.deriv + other.deriv)
        return Dual(self.value + other, self.deriv)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.deriv - other.deriv)
        return Dual(self.value - other, self.deriv)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.deriv)

    def __neg__(self):
        return Dual(-self.value, -self.deriv)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value * other.value,
                        self.value * other.deriv + self.deriv * other.value)
        return Dual(self.value * other, self.deriv * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            if np.any(np.asarray(other.value) == 0):
                raise ZeroDivisionError("dual division by a zero value component")
            q = self.value / other.value
            return Dual(q, (self.deriv - q * other.deriv) / other.value)
        return Dual(self.value / other, self.deriv / other)

    def __rtruediv__(self, other):
        if np.any(np.asarray(self.value) == 0):
            raise ZeroDivisionError("dual division by a zero value component")
        q = other / self.value
        return Dual(q, -q * self.deriv / self.value)

    def __pow__(self, power):
        if isinstance(power, Dual):
            return exp(power * log(self))
        if power == 0:
            return Dual(np.ones_like(self.value), np.zeros_like(self.deriv * self.value))
        return Dual(self.value ** power, power * self.value ** (power - 1) * self.deriv)

    def __rpow__(self, base):
        # base ** self for a plain positive base
        out = base ** self.value
        return Dual(out, out * np.log(base) * self.deriv)

    def __abs__(self):
        s = np.sign(self.value)
        return Dual(abs(self.value), s * self.deriv)

    def __getitem__(self, key):
        deriv = np.broadcast_to(self.deriv, np.shape(self.value))
        return Dual(np.asarray(self.value)[key], deriv[key])

    @property
    def shape(self):
        return np.shape(self.value)


DualScalar = Dual


def seed(x):
    """Independent variable: derivative 1 with respect to itself."""
    return Dual(x, np.ones_like(x, dtype=float) if np.ndim(x) else 1.0)


def value_of(x):
    return x.value if isinstance(x, Dual) else x


def deriv_of(x):
    if isinstance(x, Dual):
        return x.deriv
    return np.zeros_like(x, dtype=float) if np.ndim(x) else 0.0


def exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.value)
        return Dual(e, e * x.deriv)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        if np.any(np.asarray(x.value) <= 0):
            raise ValueError("log of a dual with nonpositive value")
        return Dual(np.log(x.value), x.deriv / x.value)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        if np.any(np.asarray(x.value) < 0):
            raise ValueError("sqrt of a dual with negative value")
        r = np.sqrt(x.value)
        return Dual(r, 0.5 * x.deriv / r)
    return np.sqrt(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.value), np.cos(x.value) * x.deriv)
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.value), -np.sin(x.value) * x.deriv)
    return np.cos(x)


def square(x):
    return x * x


def sum(x, axis=None):
    if isinstance(x, Dual):
        deriv = np.broadcast_to(x.deriv, np.shape(x.value))
        return Dual(np.sum(x.value, axis=axis), np.sum(deriv, axis=axis))
    return np.sum(x, axis=axis)


@dataclass(frozen=True)
class RMSProp:
    """RMSProp hyperparameters and the running mean of squared gradients."""

    step_size: float = 5e-2
    decay: float = 0.9
    epsilon: float = 1e-8
    accumulator: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")
        if self.step_size <= 0 or self.epsilon <= 0:
            raise ValueError("step_size and epsilon must be positive")
        if self.accumulator < 0:
            raise ValueError("accumulator must be nonnegative")


def rmsprop_step(state, param, grad):
    """One RMSProp update; returns ``(new_state, new_param)``."""
    acc = state.decay * state.accumulator + (1.0 - state.decay) * grad * grad
    new_param = param - state.step_size * grad / (np.sqrt(acc) + state.epsilon)
    return replace(state, accumulator=acc), new_param
