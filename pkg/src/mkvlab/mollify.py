"""Mollification by a compactly supported smooth bump: b^delta = b * h_delta."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from math import gamma, pi

import numpy as np
from scipy import integrate


class QuadratureResolutionError(ValueError):
    """The convolution quadrature is too coarse for the requested scale."""


def _bump(r2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r2, dtype=float)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


@dataclass(frozen=True)
class Mollifier:
    """h(x) = c exp(-1 / (1 - |x|^2)) on the open unit ball, zero outside.

    ``h_delta(x) = delta^{-d} h(x / delta)`` concentrates as delta -> 0.
    """

    d: int = 1
    support_radius: float = 1.0

    @cached_property
    def normalizer(self) -> float:
        if self.d == 1:
            mass, _ = integrate.quad(lambda r: np.exp(-1.0 / (1.0 - r * r)), -1, 1, epsabs=1e-14, epsrel=1e-13)
        else:
            sphere = 2 * pi ** (self.d / 2) / gamma(self.d / 2)
            radial, _ = integrate.quad(
                lambda r: r ** (self.d - 1) * np.exp(-1.0 / (1.0 - r * r)), 0, 1, epsabs=1e-14, epsrel=1e-13
            )
            mass = sphere * radial
        return 1.0 / mass

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        return self.normalizer * _bump(np.sum(x * x, axis=-1))

    def scaled(self, x, delta: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self(x / delta) / delta**self.d

    def derivative_l1(self) -> float:
        """||h'||_{L^1} in d = 1, used for the Lipschitz bound of b^delta."""
        if self.d != 1:
            raise ValueError("only available for d = 1")
        # h is unimodal and even: total variation is 2 h(0)
        return 2 * float(self(0.0))


def convolution_nodes(delta: float, mollifier: Mollifier, nodes: int):
    """Midpoint quadrature nodes and normalized weights for ``int f(x - y) h_delta(y) dy``.

    Weights are rescaled to sum to one, so constants are reproduced exactly
    and ``|b^delta| <= sup |b|`` holds at the discrete level.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    radius = delta * mollifier.support_radius
    spacing = 2 * radius / nodes
    if spacing > radius / 8:
        raise QuadratureResolutionError(
            f"quadrature spacing {spacing:.3g} exceeds delta * support_radius / 8 = {radius / 8:.3g}; "
            f"use at least 16 nodes per axis"
        )
    axis = -radius + spacing * (np.arange(nodes) + 0.5)
    mesh = np.stack(np.meshgrid(*([axis] * mollifier.d), indexing="ij"), axis=-1).reshape(-1, mollifier.d)
    w = mollifier.scaled(mesh, delta)
    keep = w > 0
    mesh, w = mesh[keep], w[keep]
    return mesh, w / w.sum()


def default_nodes(d: int) -> int:
    return 4001 if d == 1 else 81


def mollify_function(f, x_eval, delta: float, mollifier: Mollifier | None = None,
                     nodes: int | None = None, chunk: int = 1_000_000) -> np.ndarray:
    """(f * h_delta)(x) at the points ``x_eval`` of shape ``(N, d)``.

    ``f`` maps ``(P, d)`` points to ``(P,)`` or ``(P, k)`` values.
    """
    x_eval = np.asarray(x_eval, dtype=float)
    if x_eval.ndim == 1:
        x_eval = x_eval[:, None]
    mollifier = mollifier or Mollifier(x_eval.shape[-1])
    shifts, w = convolution_nodes(delta, mollifier, nodes or default_nodes(mollifier.d))
    per = max(1, chunk // len(w))
    out = []
    for start in range(0, len(x_eval), per):
        xs = x_eval[start:start + per]
        pts = (xs[:, None, :] - shifts[None, :, :]).reshape(-1, xs.shape[-1])
        vals = np.asarray(f(pts), dtype=float)
        vals = vals.reshape(len(xs), len(w), *vals.shape[1:])
        out.append(np.tensordot(vals, w, axes=([1], [0])) if vals.ndim == 2 else np.einsum("nq...,q->n...", vals, w))
    return np.concatenate(out, axis=0)


def mollify_drift(b, t: float, mu, delta: float, x_eval, mollifier: Mollifier | None = None,
                  nodes: int | None = None) -> np.ndarray:
    """b_t^delta(x, mu) = (b_t(., mu) * h_delta)(x) for a drift callable ``b(t, x, mu)``.

    Returns an array of shape ``(N, d)``.
    """
    x_eval = np.asarray(x_eval, dtype=float)
    if x_eval.ndim == 1:
        x_eval = x_eval[:, None]

    def field(pts):
        return b(t, pts, mu)

    return mollify_function(field, x_eval, delta, mollifier, nodes)


def modulus_of_continuity(values: np.ndarray, x: np.ndarray) -> float:
    """Largest difference quotient between neighbouring grid values (d = 1)."""
    values = np.asarray(values, dtype=float).reshape(len(x), -1)
    dx = np.diff(np.asarray(x, dtype=float).ravel())
    return float(np.max(np.abs(np.diff(values, axis=0)) / dx[:, None]))


def lr_on_grid(values: np.ndarray, x: np.ndarray, r: float) -> float:
    """Trapezoid L^r norm of grid values over the grid's extent (d = 1)."""
    values = np.abs(np.asarray(values, dtype=float).ravel())
    return float(np.trapezoid(values**r, np.asarray(x, dtype=float).ravel()) ** (1.0 / r))
