"""Generator L, the maps R and U, and the characteristics A, Q, C.

For a probability measure lambda and a test function phi:

    L phi  = b . grad phi + 1/2 a : hess phi,   a = sigma sigma^T + sigma_bar sigma_bar^T
    R phi  = sigma_bar^T grad phi   (R^m valued)
    U phi  = sigma^T grad phi       (R^d valued)
    A[phi]        = lambda[L phi]
    Q[phi, psi]   = lambda[R phi] . lambda[R psi]
    C[phi, psi]   = lambda[U phi . U psi]

Coefficients are evaluated at the same measure lambda unless a separate
``coeff_measure`` is given. Measures may be batched; results then carry the
batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coeffs import CoefficientSet
from .functions import TestFunction
from .hermite import ProbeGrid, seminorm_m_star
from .measure import MASS_TOL, NotProbabilityMeasureError, WeightedSampleMeasure


@dataclass(frozen=True)
class OperatorContext:
    cs: CoefficientSet
    t: float = 0.0


@dataclass
class CharacteristicValues:
    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray


def _measure(lam) -> WeightedSampleMeasure:
    if hasattr(lam, "as_measure"):
        lam = lam.as_measure()
    if not isinstance(lam, WeightedSampleMeasure):
        raise TypeError(f"expected a WeightedSampleMeasure or GridDensity, got {type(lam).__name__}")
    return lam


def _require_probability(lam: WeightedSampleMeasure) -> None:
    w = np.asarray(lam.weights)
    if np.any(w < 0) or not np.all(np.abs(lam.mass - 1.0) <= MASS_TOL):
        raise NotProbabilityMeasureError("characteristics are only defined for probability measures")


def _points_for(x, lam: WeightedSampleMeasure) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1), True
    if x.ndim == 1 and x.shape[0] == lam.d:
        return x[None, :], True
    if x.ndim == 1 and lam.d == 1:
        return x[:, None], False
    return x, False


def _generator_at(ctx: OperatorContext, x, coeff_mu, phi: TestFunction) -> np.ndarray:
    cs, t = ctx.cs, ctx.t
    b = cs.drift(t, x, coeff_mu)
    a = cs.diffusion_matrix(t, x, coeff_mu)
    g = phi.grad(x)
    h = phi.hess(x)
    hs = 0.5 * (h + np.swapaxes(h, -1, -2))
    return np.sum(b * g, axis=-1) + 0.5 * np.sum(a * hs, axis=(-2, -1))


def apply_L(ctx: OperatorContext, lam, phi: TestFunction, x) -> np.ndarray:
    """(L_t(lambda) phi)(x); ``x`` is a point ``(d,)`` or points ``(..., N, d)``."""
    lam = _measure(lam)
    xp, single = _points_for(x, lam)
    out = _generator_at(ctx, xp, lam, phi)
    return out.reshape(()) if single else out


def char_A(ctx: OperatorContext, lam, phi: TestFunction, coeff_measure=None) -> np.ndarray:
    """A_t(lambda)[phi] = lambda[L_t(coeff_measure) phi], with coeff_measure = lambda by default."""
    lam = _measure(lam)
    _require_probability(lam)
    coeff_mu = lam if coeff_measure is None else _measure(coeff_measure)
    vals = _generator_at(ctx, lam.points, coeff_mu, phi)
    return lam.integrate(vals)


def _R(ctx, x, mu, phi):
    sb = ctx.cs.sigma_bar(ctx.t, x, mu)  # (..., N, d, m)
    return np.sum(sb * phi.grad(x)[..., :, None], axis=-2)


def _U(ctx, x, mu, phi):
    s = ctx.cs.sigma(ctx.t, x, mu)  # (..., N, d, d)
    return np.sum(s * phi.grad(x)[..., :, None], axis=-2)


def char_Q(ctx: OperatorContext, lam, phi: TestFunction, psi: TestFunction | None = None) -> np.ndarray:
    """Q_t(lambda)[phi, psi] = lambda[sigma_bar^T grad phi] . lambda[sigma_bar^T grad psi]."""
    lam = _measure(lam)
    _require_probability(lam)
    vphi = lam.integrate_vector(_R(ctx, lam.points, lam, phi))
    vpsi = vphi if psi is None else lam.integrate_vector(_R(ctx, lam.points, lam, psi))
    return np.sum(vphi * vpsi, axis=-1)


def char_C(ctx: OperatorContext, lam, phi: TestFunction, psi: TestFunction | None = None) -> np.ndarray:
    """C_t(lambda)[phi, psi] = lambda[(sigma^T grad phi) . (sigma^T grad psi)]."""
    lam = _measure(lam)
    _require_probability(lam)
    uphi = _U(ctx, lam.points, lam, phi)
    upsi = uphi if psi is None else _U(ctx, lam.points, lam, psi)
    return lam.integrate(np.sum(uphi * upsi, axis=-1))


def characteristics(ctx: OperatorContext, lam, phi: TestFunction) -> CharacteristicValues:
    """A[phi], Q[phi, phi] and C[phi, phi] sharing one evaluation of the coefficients."""
    lam = _measure(lam)
    _require_probability(lam)
    cs, t, x = ctx.cs, ctx.t, lam.points
    b = cs.drift(t, x, lam)
    s = cs.sigma(t, x, lam)
    sb = cs.sigma_bar(t, x, lam)
    a = np.sum(s[..., :, None, :] * s[..., None, :, :], axis=-1) + np.sum(sb[..., :, None, :] * sb[..., None, :, :], axis=-1)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    g = phi.grad(x)
    h = phi.hess(x)
    h = 0.5 * (h + np.swapaxes(h, -1, -2))
    A = lam.integrate(np.sum(b * g, axis=-1) + 0.5 * np.sum(a * h, axis=(-2, -1)))
    r = lam.integrate_vector(np.sum(sb * g[..., :, None], axis=-2))
    u = np.sum(s * g[..., :, None], axis=-2)
    return CharacteristicValues(A, np.sum(r * r, axis=-1), lam.integrate(np.sum(u * u, axis=-1)))


def drift_bound(ctx: OperatorContext, phi: TestFunction, grid: ProbeGrid | None = None) -> float:
    """c_{b,sigma,sigma_bar} ||phi||_2^*, a uniform bound for |A_t(lambda)[phi]|."""
    c = ctx.cs.drift_constant
    if c == 0:
        return 0.0
    return float(c * seminorm_m_star(phi, 2, grid))


def first_order_bound(ctx: OperatorContext, phi: TestFunction, grid: ProbeGrid | None = None) -> float:
    """|b| ||phi||_1^* + 1/2 (|sigma|^2 + |sigma_bar|^2) ||phi||_2^*, the sharper form of the bound."""
    cs = ctx.cs
    return float(cs.b_sup * seminorm_m_star(phi, 1, grid)
                 + 0.5 * (cs.sigma_sup**2 + cs.sigma_bar_sup**2) * seminorm_m_star(phi, 2, grid))
