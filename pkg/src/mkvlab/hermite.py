"""Hermite functions on R^d, Hermite coefficients and the H_p scale of norms.

Indexing starts at 0: ``h_0(x) = (2 pi)^{-1/4} exp(-x^2/4)`` is the square
root of the standard normal density, and ``h_k = He_k g^{1/2} / sqrt(k!)``
with ``He_k`` the probabilists' Hermite polynomials. The family is
orthonormal in L^2(dx).
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .functions import TestFunction
from .measure import WeightedSampleMeasure

MAX_DEGREE = 600
SUP_BOUND_1D = (2 * np.pi) ** 0.25
_H0_SCALE = (2 * np.pi) ** -0.25


class HermiteRangeError(ValueError):
    """Requested degree is outside the range where the recurrence is trusted."""


class DomainWarning(UserWarning):
    """Quadrature box too small for the integrand."""


def bracket(k) -> np.ndarray:
    """<k> = (1 + |k|^2)^{1/2}, vectorised over the last axis."""
    k = np.asarray(k, dtype=float)
    return np.sqrt(1.0 + np.sum(k * k, axis=-1))


def hermite_table(kmax: int, x) -> np.ndarray:
    """Values ``h_0..h_kmax`` at the points ``x``; shape ``(kmax + 1,) + x.shape``.

    Normalised three-term recurrence
    ``h_{k+1} = (x h_k - sqrt(k) h_{k-1}) / sqrt(k + 1)``; no factorials are formed.
    """
    if kmax < 0:
        raise ValueError("kmax must be nonnegative")
    if kmax > MAX_DEGREE:
        raise HermiteRangeError(f"degree {kmax} exceeds the supported maximum {MAX_DEGREE}")
    x = np.asarray(x, dtype=float)
    out = np.empty((kmax + 1,) + x.shape)
    out[0] = _H0_SCALE * np.exp(-0.25 * x * x)
    if kmax >= 1:
        out[1] = x * out[0]
    for k in range(1, kmax):
        out[k + 1] = (x * out[k] - np.sqrt(k) * out[k - 1]) / np.sqrt(k + 1)
    return out


def hermite_eval(k, x) -> np.ndarray:
    """h_k(x) for a multi-index ``k`` and point(s) ``x`` of trailing dimension ``len(k)``."""
    k = tuple(int(v) for v in np.atleast_1d(k))
    if any(v < 0 for v in k):
        raise ValueError(f"multi-index entries must be nonnegative, got {k}")
    x = np.asarray(x, dtype=float)
    if len(k) == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != len(k):
        raise ValueError(f"point dimension {x.shape[-1]} does not match multi-index {k}")
    out = np.ones(x.shape[:-1])
    for axis, deg in enumerate(k):
        out = out * hermite_table(deg, x[..., axis])[deg]
    return out


class HermiteBasis:
    """Tensor Hermite basis on R^d truncated at ``|k|_inf <= kmax``."""

    def __init__(self, d: int, kmax: int):
        if d < 1:
            raise ValueError("d must be >= 1")
        if kmax > MAX_DEGREE:
            raise HermiteRangeError(f"degree {kmax} exceeds the supported maximum {MAX_DEGREE}")
        self.d = d
        self.kmax = kmax
        self.indices = np.array(list(itertools.product(range(kmax + 1), repeat=d)), dtype=int)
        self.brackets = bracket(self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    def evaluate(self, x) -> np.ndarray:
        """Matrix of basis values, shape ``(N, len(self))`` for points ``(N, d)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.d == 1 else x[None, :]
        out = np.ones((len(self), x.shape[0]))
        for axis in range(self.d):
            table = hermite_table(self.kmax, x[:, axis])
            out *= table[self.indices[:, axis]]
        return out.T


@dataclass(frozen=True)
class CoeffVector:
    """Truncated Hermite coefficient sequence, ordered like ``HermiteBasis.indices``."""

    d: int
    kmax: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != ((self.kmax + 1) ** self.d,):
            raise ValueError(f"expected {(self.kmax + 1) ** self.d} coefficients, got shape {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def indices(self) -> np.ndarray:
        return _indices(self.d, self.kmax)

    def __getitem__(self, k) -> float:
        k = np.atleast_1d(k)
        flat = 0
        for v in k:
            flat = flat * (self.kmax + 1) + int(v)
        return float(self.coeffs[flat])

    def __add__(self, other: "CoeffVector") -> "CoeffVector":
        _check_compatible(self, other)
        return CoeffVector(self.d, self.kmax, self.coeffs + other.coeffs)

    def __mul__(self, a: float) -> "CoeffVector":
        return CoeffVector(self.d, self.kmax, a * self.coeffs)

    __rmul__ = __mul__

    def to_json(self) -> str:
        payload = {
            "d": self.d,
            "kmax": self.kmax,
            "coeffs": [[k.tolist(), float(v)] for k, v in zip(self.indices, self.coeffs)],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "CoeffVector":
        payload = json.loads(text)
        d, kmax = int(payload["d"]), int(payload["kmax"])
        out = np.zeros((kmax + 1) ** d)
        for k, v in payload["coeffs"]:
            flat = 0
            for e in k:
                flat = flat * (kmax + 1) + int(e)
            out[flat] = v
        return cls(d, kmax, out)


@lru_cache(maxsize=32)
def _indices(d: int, kmax: int) -> np.ndarray:
    idx = np.array(list(itertools.product(range(kmax + 1), repeat=d)), dtype=int)
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=16)
def _gauss_legendre(half_width: float, nodes: int):
    x, w = np.polynomial.legendre.leggauss(nodes)
    x, w = half_width * x, half_width * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _check_compatible(a: CoeffVector, b: CoeffVector) -> None:
    if a.d != b.d or a.kmax != b.kmax:
        raise ValueError(f"truncation mismatch: (d={a.d}, kmax={a.kmax}) vs (d={b.d}, kmax={b.kmax})")


def hermite_coeffs_fn(
    f,
    basis: HermiteBasis,
    half_width: float = 12.0,
    nodes: int = 400,
    boundary_tol: float = 1e-10,
) -> CoeffVector:
    """Quadrature approximation of ``int f h_k dx`` on the box ``[-L, L]^d``.

    ``f`` maps points ``(N, d)`` to values ``(N,)``. Gauss-Legendre nodes are
    used per axis. A ``DomainWarning`` is emitted when ``|f h_k|`` on the box
    boundary exceeds ``boundary_tol``.
    """
    d = basis.d
    x1, w1 = _gauss_legendre(float(half_width), int(nodes))
    grids = np.meshgrid(*([x1] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.ones(len(pts))
    for wg in np.meshgrid(*([w1] * d), indexing="ij"):
        wts = wts * wg.ravel()
    fvals = np.asarray(f(pts), dtype=float).reshape(-1)
    coeffs = basis.evaluate(pts).T @ (wts * fvals)

    corners = np.array(list(itertools.product([-half_width, half_width], repeat=d)))
    face = np.concatenate([corners, _face_samples(d, half_width)])
    edge = np.abs(np.asarray(f(face), dtype=float).reshape(-1))[:, None] * np.abs(basis.evaluate(face))
    if edge.max(initial=0.0) > boundary_tol:
        warnings.warn(
            f"|f h_k| reaches {edge.max():.3g} on the boundary of [-{half_width}, {half_width}]^{d}; "
            "enlarge the quadrature domain",
            DomainWarning,
            stacklevel=2,
        )
    return CoeffVector(d, basis.kmax, coeffs)


def _face_samples(d: int, L: float, per_axis: int = 21) -> np.ndarray:
    if d == 1:
        return np.array([[-L], [L]])
    line = np.linspace(-L, L, per_axis)
    out = []
    for axis in range(d):
        others = np.meshgrid(*([line] * (d - 1)), indexing="ij")
        rest = np.stack([g.ravel() for g in others], axis=-1)
        for sign in (-L, L):
            pts = np.insert(rest, axis, sign, axis=1)
            out.append(pts)
    return np.concatenate(out)


def hermite_coeffs_measure(mu: WeightedSampleMeasure, basis: HermiteBasis) -> CoeffVector:
    """Coefficients ``sum_i w_i h_k(x_i)`` of a weighted point cloud."""
    if mu.batch_shape:
        raise ValueError("expected an unbatched measure")
    if mu.d != basis.d:
        raise ValueError(f"measure dimension {mu.d} does not match basis dimension {basis.d}")
    values = basis.evaluate(mu.points)
    w = np.broadcast_to(mu.weights, (mu.size,))
    return CoeffVector(basis.d, basis.kmax, w @ values)


def hp_norm(v: CoeffVector, p: float) -> float:
    """Truncated H_p seminorm ``(sum_k (<k>^{p/d} v_k)^2)^{1/2}``."""
    weights = bracket(v.indices) ** (p / v.d)
    return float(np.sqrt(np.sum((weights * v.coeffs) ** 2)))


def pairing(lam: CoeffVector, phi: CoeffVector) -> float:
    """Truncated duality ``sum_k lam_k phi_k``."""
    _check_compatible(lam, phi)
    return float(np.dot(lam.coeffs, phi.coeffs))


@dataclass(frozen=True)
class ProbeGrid:
    """Uniform grid on ``[-half_width, half_width]^d`` used for sup estimates."""

    d: int = 1
    half_width: float = 12.0
    points: int = 4801

    def nodes(self) -> np.ndarray:
        line = np.linspace(-self.half_width, self.half_width, self.points)
        grids = np.meshgrid(*([line] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    @property
    def spacing(self) -> float:
        return 2 * self.half_width / (self.points - 1)


def default_grid(d: int) -> ProbeGrid:
    return ProbeGrid(d, 12.0, 4801) if d == 1 else ProbeGrid(d, 8.0, 321)


def seminorm_m_star(phi: TestFunction, m: int, grid: ProbeGrid | None = None) -> float:
    """Grid-maximised lower estimate of ``max_{|a|<=m} sup_x |<x>^m d^a phi(x)|``.

    Orders up to 2 use the analytic derivatives of ``phi``; orders 3 and 4
    use central differences of the Hessian.
    """
    if m < 0:
        raise ValueError("m must be nonnegative")
    if m > 4:
        raise ValueError("derivatives above order 4 are not supported")
    grid = grid or default_grid(phi.d)
    if grid.d != phi.d:
        raise ValueError("grid dimension does not match the test function")
    x = grid.nodes()
    weight = (1.0 + np.sum(x * x, axis=-1)) ** (m / 2)
    best = np.max(weight * np.abs(phi.value(x)))
    if m >= 1:
        best = max(best, np.max(weight[:, None] * np.abs(phi.gradient(x))))
    if m >= 2:
        hess = phi.hessian(x).reshape(len(x), -1)
        best = max(best, np.max(weight[:, None] * np.abs(hess)))
    if m >= 3:
        step = 1e-3
        eye = np.eye(phi.d)
        for axis in range(phi.d):
            e = step * eye[axis]
            third = (phi.hessian(x + e) - phi.hessian(x - e)) / (2 * step)
            best = max(best, np.max(weight[:, None] * np.abs(third.reshape(len(x), -1))))
            if m >= 4:
                for axis2 in range(phi.d):
                    e2 = step * eye[axis2]
                    fourth = (
                        phi.hessian(x + e + e2)
                        - phi.hessian(x + e - e2)
                        - phi.hessian(x - e + e2)
                        + phi.hessian(x - e - e2)
                    ) / (4 * step * step)
                    best = max(best, np.max(weight[:, None] * np.abs(fourth.reshape(len(x), -1))))
    return float(best)
