"""Smooth test functions with analytic value, gradient and Hessian."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class TestFunction:
    """A function phi: R^d -> R together with its first two derivatives.

    All three evaluators are vectorised over leading axes: for ``x`` of shape
    ``(..., d)`` they return shapes ``(...)``, ``(..., d)`` and ``(..., d, d)``.
    """

    __test__ = False  # keep pytest from collecting this class

    name: str
    d: int
    value: Callable[[Array], Array]
    gradient: Callable[[Array], Array]
    hessian: Callable[[Array], Array]
    support_radius: float | None = None

    def __call__(self, x) -> Array:
        return self.value(_as_points(x, self.d))

    def grad(self, x) -> Array:
        return self.gradient(_as_points(x, self.d))

    def hess(self, x) -> Array:
        return self.hessian(_as_points(x, self.d))

    def __mul__(self, a: float) -> "TestFunction":
        a = float(a)
        return TestFunction(
            f"{a:g}*{self.name}",
            self.d,
            lambda x: a * self.value(x),
            lambda x: a * self.gradient(x),
            lambda x: a * self.hessian(x),
            self.support_radius,
        )

    __rmul__ = __mul__

    def __add__(self, other: "TestFunction") -> "TestFunction":
        if other.d != self.d:
            raise ValueError("dimension mismatch")
        radius = None
        if self.support_radius is not None and other.support_radius is not None:
            radius = max(self.support_radius, other.support_radius)
        return TestFunction(
            f"({self.name}+{other.name})",
            self.d,
            lambda x: self.value(x) + other.value(x),
            lambda x: self.gradient(x) + other.gradient(x),
            lambda x: self.hessian(x) + other.hessian(x),
            radius,
        )

    def dilated(self, c: float) -> "TestFunction":
        """x -> phi(x / c)."""
        c = float(c)
        return TestFunction(
            f"{self.name}(x/{c:g})",
            self.d,
            lambda x: self.value(x / c),
            lambda x: self.gradient(x / c) / c,
            lambda x: self.hessian(x / c) / c**2,
            None if self.support_radius is None else self.support_radius * c,
        )


def _as_points(x, d: int) -> Array:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.shape[-1] != d:
        if d == 1:
            x = x[..., None]
        else:
            raise ValueError(f"expected trailing dimension {d}, got shape {x.shape}")
    return x


def gaussian(d: int = 1, center=0.0, width: float = 1.0, amplitude: float = 1.0) -> TestFunction:
    """amplitude * exp(-|x - center|^2 / (2 width^2))."""
    c = np.broadcast_to(np.asarray(center, dtype=float), (d,)).copy()
    w2 = float(width) ** 2
    eye = np.eye(d)

    def value(x):
        u = x - c
        return amplitude * np.exp(-np.sum(u * u, axis=-1) / (2 * w2))

    def gradient(x):
        u = x - c
        return -u / w2 * value(x)[..., None]

    def hessian(x):
        u = x - c
        outer = u[..., :, None] * u[..., None, :]
        return (outer / w2**2 - eye / w2) * value(x)[..., None, None]

    return TestFunction(f"gauss(c={c.tolist()},w={width:g})", d, value, gradient, hessian)


def odd_gaussian(d: int = 1, axis: int = 0, center=0.0, width: float = 1.0) -> TestFunction:
    """(x_axis - c_axis) * exp(-|x - c|^2 / (2 width^2)); phi'(c) = 1 along ``axis``."""
    c = np.broadcast_to(np.asarray(center, dtype=float), (d,)).copy()
    w2 = float(width) ** 2
    eye = np.eye(d)
    e = eye[axis]

    def g(x):
        u = x - c
        return np.exp(-np.sum(u * u, axis=-1) / (2 * w2))

    def value(x):
        return (x[..., axis] - c[axis]) * g(x)

    def gradient(x):
        u = x - c
        gx = g(x)[..., None]
        return e * gx - u[..., axis, None] * u / w2 * gx

    def hessian(x):
        u = x - c
        gx = g(x)[..., None, None]
        grad_g = -u / w2
        hess_g = u[..., :, None] * u[..., None, :] / w2**2 - eye / w2
        cross = e[:, None] * grad_g[..., None, :] + grad_g[..., :, None] * e[None, :]
        return (cross + u[..., axis, None, None] * hess_g) * gx

    return TestFunction(f"oddgauss(axis={axis},c={c.tolist()},w={width:g})", d, value, gradient, hessian)


def constant(value: float, d: int = 1) -> TestFunction:
    v = float(value)
    return TestFunction(
        f"const({v:g})",
        d,
        lambda x: np.full(x.shape[:-1], v),
        lambda x: np.zeros(x.shape),
        lambda x: np.zeros(x.shape + (d,)),
    )


def quadratic(d: int = 1) -> TestFunction:
    """|x|^2. Not rapidly decaying; handy for hand-checkable averages."""
    eye = np.eye(d)
    return TestFunction(
        "sqnorm",
        d,
        lambda x: np.sum(x * x, axis=-1),
        lambda x: 2 * x,
        lambda x: np.broadcast_to(2 * eye, x.shape + (d,)).copy(),
    )


def from_value(f: Callable[[Array], Array], d: int = 1, step: float = 1e-4, name: str = "fd") -> TestFunction:
    """Wrap a bare callable; derivatives come from central finite differences."""
    eye = np.eye(d)

    def gradient(x):
        cols = [(f(x + step * eye[i]) - f(x - step * eye[i])) / (2 * step) for i in range(d)]
        return np.stack(cols, axis=-1)

    def hessian(x):
        out = np.empty(x.shape + (d,))
        for i in range(d):
            for j in range(d):
                ei, ej = step * eye[i], step * eye[j]
                out[..., i, j] = (
                    f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
                ) / (4 * step * step)
        return out

    return TestFunction(name, d, f, gradient, hessian)


def build(kind: str, d: int = 1, **params) -> TestFunction:
    """Construct a catalogue test function from a config entry."""
    makers = {"gaussian": gaussian, "odd_gaussian": odd_gaussian, "constant": constant}
    if kind not in makers:
        raise ValueError(f"unknown test function kind {kind!r}; expected one of {sorted(makers)}")
    return makers[kind](d=d, **params)
