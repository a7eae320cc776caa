"""Coefficient models: drift b, idiosyncratic diffusion sigma, common diffusion sigma_bar.

Every coefficient is a callable ``f(t, x, mu)`` vectorised over particles and
batches: ``x`` has shape ``(..., N, d)`` and ``mu`` is a
:class:`WeightedSampleMeasure` whose batch shape equals ``x.shape[:-2]``.
Drifts return ``(..., N, d)``; diffusions return ``(..., N, d, k)`` with
``k = d`` for sigma and ``k = m`` for sigma_bar.

Sup-norm conventions (used by the uniform bounds in :mod:`mkvlab.ops`):
``|b| = sum_i |b_i|`` and ``|sigma| = sum_{i,k} |sigma_ik|``. Both reduce to
the absolute value when ``d = m = 1`` and make
``|b . grad phi| + 1/2 |a : hess phi|`` bounded by the stated constants times
the largest derivative entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .measure import WeightedSampleMeasure, order_free_sum

_PAIR_CHUNK = 2_000_000


def _points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    return x


def _pairwise_reduce(x, mu: WeightedSampleMeasure, kernel) -> np.ndarray:
    """``sum_j w_j kernel(x_i - y_j)`` with scalar kernel, chunked over evaluation points."""
    y = mu.points
    w = np.broadcast_to(mu.weights, y.shape[:-1])
    n_eval = x.shape[-2]
    batch = int(np.prod(y.shape[:-2], dtype=int))
    chunk = max(1, _PAIR_CHUNK // max(1, batch * y.shape[-2]))
    parts = []
    for start in range(0, n_eval, chunk):
        xs = x[..., start:start + chunk, :]
        diff = xs[..., :, None, :] - y[..., None, :, :]
        parts.append(order_free_sum(kernel(diff) * w[..., None, :], axis=-1))
    return np.concatenate(parts, axis=-1)


def drift_indicator(x, mu: WeightedSampleMeasure, R: float) -> np.ndarray:
    """mu[B_R(x)], the mass of mu in the open ball of radius R around x."""
    if R <= 0:
        raise ValueError("R must be positive")
    single = np.ndim(x) <= 1 and not (mu.d > 1 and np.ndim(x) == 0)
    xp = _points(x, mu.d)
    if xp.ndim == 1:
        xp = xp[None, :]
    if mu.d == 1 and not mu.batch_shape and xp.ndim == 2:
        out = _indicator_sorted_1d(xp[:, 0], mu, R)
    else:
        out = _indicator_pairwise(xp, mu, R)
    return out[0] if single and out.shape == (1,) else out


def _indicator_pairwise(x: np.ndarray, mu: WeightedSampleMeasure, R: float) -> np.ndarray:
    w = np.broadcast_to(mu.weights, mu.points.shape[:-1])
    flat = w.reshape(-1)
    if flat.size and np.all(flat == flat[0]):
        # equal weights: an integer count times the weight is exact and order free
        diff = x[..., :, None, :] - mu.points[..., None, :, :]
        return np.count_nonzero(np.sum(diff * diff, axis=-1) < R * R, axis=-1) * flat[0]
    return _pairwise_reduce(x, mu, lambda u: (np.sum(u * u, axis=-1) < R * R).astype(float))


def _indicator_sorted_1d(x: np.ndarray, mu: WeightedSampleMeasure, R: float) -> np.ndarray:
    y = mu.points[:, 0]
    w = np.broadcast_to(mu.weights, y.shape)
    order = np.lexsort((w, y))
    ys = y[order]
    cum = np.concatenate([[0.0], np.cumsum(w[order])])
    upper = np.searchsorted(ys, x + R, side="left")
    lower = np.searchsorted(ys, x - R, side="right")
    return cum[upper] - cum[lower]


def hk_kernel(u, R: float) -> np.ndarray:
    """k_HK(u) = u 1_{|u| <= R}."""
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= R, u, 0.0)


def drift_hk(x, mu: WeightedSampleMeasure, R: float, kernel: Callable | None = None) -> np.ndarray:
    """Hegselmann-Krause drift ``-sum_j w_j k_HK(x - y_j)`` (real-valued setting only)."""
    if mu.d != 1:
        raise ValueError(f"the Hegselmann-Krause drift is defined for d = 1, got d = {mu.d}")
    kern = kernel or (lambda u: hk_kernel(u, R))
    single = np.ndim(x) == 0 or (np.ndim(x) == 1 and np.size(x) == 1)
    xp = _points(x, 1)
    if xp.ndim == 1:
        xp = xp[None, :]
    out = -_pairwise_reduce(xp, mu, lambda u: kern(u[..., 0]))
    return out.reshape(()) if single else out


# Coefficient kinds. Kinds are small picklable callables so simulations can
# be farmed out to worker processes.


@dataclass(frozen=True)
class Constant:
    """A coefficient independent of (t, x, mu)."""

    value: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "value", np.asarray(self.value, dtype=float))

    def __call__(self, t, x, mu):
        return np.broadcast_to(self.value, x.shape[:-1] + self.value.shape)

    @property
    def sup(self) -> float:
        return float(np.sum(np.abs(self.value)))

    @property
    def ellipticity(self) -> float:
        v = self.value
        return float(np.linalg.eigvalsh(v @ v.T).min())


@dataclass(frozen=True)
class IndicatorDrift:
    """b(x, mu) = mu[B_R(x)] along ``direction`` (all ones by default)."""

    R: float
    direction: np.ndarray | None = None

    def _dir(self, d):
        return np.ones(d) if self.direction is None else np.asarray(self.direction, dtype=float)

    def __call__(self, t, x, mu):
        return drift_indicator(x, mu, self.R)[..., None] * self._dir(x.shape[-1])

    def sup_for(self, d: int) -> float:
        return float(np.sum(np.abs(self._dir(d))))


@dataclass(frozen=True)
class HKDrift:
    """Hegselmann-Krause drift, optionally with the kernel mollified at scale ``delta``."""

    R: float
    delta: float | None = None
    table_points: int = 8001

    def __post_init__(self):
        if self.delta is not None:
            from .mollify import Mollifier, mollify_function

            half = self.R + self.delta
            grid = np.linspace(-half, half, self.table_points)
            vals = mollify_function(lambda u: hk_kernel(u[:, 0], self.R), grid[:, None], self.delta, Mollifier(1))
            object.__setattr__(self, "_table", (grid, vals))

    def kernel(self, u):
        if self.delta is None:
            return hk_kernel(u, self.R)
        # the symmetric mollifier leaves the linear part unchanged, so only the
        # band around |u| = R needs the tabulated convolution
        u = np.asarray(u, dtype=float)
        a = np.abs(u)
        out = np.where(a <= self.R - self.delta, u, 0.0)
        band = (a > self.R - self.delta) & (a < self.R + self.delta)
        grid, vals = self._table
        out[band] = np.interp(u[band], grid, vals)
        return out

    def __call__(self, t, x, mu):
        if x.shape[-1] != 1:
            raise ValueError("the Hegselmann-Krause drift is defined for d = 1")
        return drift_hk(x, mu, self.R, kernel=self.kernel)[..., None]

    @property
    def sup(self) -> float:
        return float(self.R)


@dataclass(frozen=True)
class StatisticTanh:
    """sigma(x, lambda) = s0 (1 + a tanh(lambda[rho])) I with a bounded Lipschitz rho.

    ``rho`` acts on the first coordinate: ``tanh``, ``sin`` or ``arctan``.
    """

    s0: float
    a: float
    rows: int
    cols: int
    rho: str = "tanh"

    def __post_init__(self):
        if not abs(self.a) < 1:
            raise ValueError("|a| < 1 is required for ellipticity")
        if self.rho not in _RHO:
            raise ValueError(f"unknown rho {self.rho!r}")

    def __call__(self, t, x, mu):
        stat = mu.integrate(_RHO[self.rho](mu.points[..., 0]))
        scale = self.s0 * (1.0 + self.a * np.tanh(stat))
        eye = np.eye(self.rows, self.cols)
        scale = np.broadcast_to(np.asarray(scale)[..., None], x.shape[:-1])
        return scale[..., None, None] * eye

    @property
    def sup(self) -> float:
        return float(abs(self.s0) * (1 + abs(self.a)) * min(self.rows, self.cols))

    @property
    def ellipticity(self) -> float:
        if self.rows != self.cols:
            return 0.0
        return float((self.s0 * (1 - abs(self.a))) ** 2)


_RHO = {"tanh": np.tanh, "sin": np.sin, "arctan": np.arctan}


@dataclass(frozen=True)
class TimeLinear:
    """sigma_t = (s0 + s1 t) I on [0, horizon]."""

    s0: float
    s1: float
    rows: int
    cols: int
    horizon: float = 1.0

    def __call__(self, t, x, mu):
        eye = np.eye(self.rows, self.cols) * (self.s0 + self.s1 * t)
        return np.broadcast_to(eye, x.shape[:-1] + eye.shape)

    @property
    def sup(self) -> float:
        return float(max(abs(self.s0), abs(self.s0 + self.s1 * self.horizon)) * min(self.rows, self.cols))

    @property
    def ellipticity(self) -> float:
        if self.rows != self.cols:
            return 0.0
        ends = np.array([self.s0, self.s0 + self.s1 * self.horizon])
        if ends.min() <= 0 <= ends.max():
            return 0.0
        return float(np.min(ends**2))


@dataclass(frozen=True)
class HolderDiag:
    """sigma(x) = (s0 + c min(|x|^beta, 1)) I, Hoelder of order beta at the origin."""

    s0: float
    c: float
    beta: float
    rows: int
    cols: int

    def __call__(self, t, x, mu):
        r = np.sqrt(np.sum(x * x, axis=-1))
        scale = self.s0 + self.c * np.minimum(r**self.beta, 1.0)
        return scale[..., None, None] * np.eye(self.rows, self.cols)

    @property
    def sup(self) -> float:
        return float((abs(self.s0) + abs(self.c)) * min(self.rows, self.cols))

    @property
    def ellipticity(self) -> float:
        if self.rows != self.cols or self.c < 0:
            return 0.0
        return float(self.s0**2)


@dataclass(frozen=True)
class CoefficientSet:
    """Drift, diffusion and common diffusion together with their declared bounds."""

    drift: Callable
    sigma: Callable
    sigma_bar: Callable
    d: int = 1
    m: int = 1
    b_sup: float = 0.0
    sigma_sup: float = 0.0
    sigma_bar_sup: float = 0.0
    kappa: float = 0.0
    beta: float = 1.0
    holder_c: float | None = None
    spec: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def drift_constant(self) -> float:
        """c_{b,sigma,sigma_bar} = |b| + (|sigma|^2 + |sigma_bar|^2) / 2."""
        return self.b_sup + 0.5 * (self.sigma_sup**2 + self.sigma_bar_sup**2)

    def diffusion_matrix(self, t, x, mu) -> np.ndarray:
        """a = sigma sigma^T + sigma_bar sigma_bar^T, symmetrised."""
        s = self.sigma(t, x, mu)
        sb = self.sigma_bar(t, x, mu)
        a = _outer_sum(s) + _outer_sum(sb)
        return 0.5 * (a + np.swapaxes(a, -1, -2))

    @classmethod
    def constant(cls, b=0.0, sigma=1.0, sigma_bar=0.0, d: int = 1, m: int = 1) -> "CoefficientSet":
        """Constant coefficients; scalars are expanded to ``b * ones`` and ``s * I``."""
        bv = np.broadcast_to(np.asarray(b, dtype=float), (d,)).copy()
        sv = _as_matrix(sigma, d, d)
        sbv = _as_matrix(sigma_bar, d, m)
        drift, sig, sigb = Constant(bv), Constant(sv), Constant(sbv)
        return cls(
            drift,
            sig,
            sigb,
            d=d,
            m=m,
            b_sup=drift.sup,
            sigma_sup=sig.sup,
            sigma_bar_sup=sigb.sup,
            kappa=max(sig.ellipticity, 0.0),
            beta=1.0,
            holder_c=0.0,
            spec={
                "drift": {"kind": "constant", "params": {"value": bv.tolist()}},
                "sigma": {"kind": "constant", "params": {"value": sv.tolist()}},
                "sigma_bar": {"kind": "constant", "params": {"value": sbv.tolist()}},
            },
        )


def _outer_sum(s: np.ndarray) -> np.ndarray:
    # sum over the noise axis without BLAS so results do not depend on batch layout
    return np.sum(s[..., :, None, :] * s[..., None, :, :], axis=-1)


def _as_matrix(v, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return v * np.eye(rows, cols)
    return np.broadcast_to(v, (rows, cols)).copy()


DRIFT_KINDS = ("zero", "constant", "indicator", "hk")
DIFFUSION_KINDS = ("zero", "constant", "statistic_tanh", "time_linear", "holder")


def build_drift(kind: str, params: dict, d: int):
    """Return ``(callable, sup_norm)`` for a drift config entry."""
    params = dict(params or {})
    if kind == "zero":
        c = Constant(np.zeros(d))
        return c, 0.0
    if kind == "constant":
        c = Constant(np.broadcast_to(np.asarray(params.get("value", 0.0), dtype=float), (d,)).copy())
        return c, c.sup
    if kind == "indicator":
        direction = params.get("direction")
        b = IndicatorDrift(float(params.get("R", 1.0)), None if direction is None else np.asarray(direction, float))
        return b, b.sup_for(d)
    if kind == "hk":
        if d != 1:
            raise ValueError("drift kind 'hk' requires d = 1")
        delta = params.get("delta")
        b = HKDrift(float(params.get("R", 1.0)), None if delta is None else float(delta))
        return b, b.sup
    raise ValueError(f"unknown drift kind {kind!r}; expected one of {DRIFT_KINDS}")


def build_diffusion(kind: str, params: dict, rows: int, cols: int, horizon: float = 1.0):
    """Return ``(callable, sup_norm, ellipticity, beta)`` for a diffusion config entry."""
    params = dict(params or {})
    if kind == "zero":
        return Constant(np.zeros((rows, cols))), 0.0, 0.0, 1.0
    if kind == "constant":
        c = Constant(_as_matrix(params.get("value", 1.0), rows, cols))
        return c, c.sup, c.ellipticity if rows == cols else 0.0, 1.0
    if kind == "statistic_tanh":
        c = StatisticTanh(float(params.get("s0", 1.0)), float(params.get("a", 0.5)), rows, cols,
                          params.get("rho", "tanh"))
        return c, c.sup, c.ellipticity, 1.0
    if kind == "time_linear":
        c = TimeLinear(float(params.get("s0", 1.0)), float(params.get("s1", 1.0)), rows, cols, horizon)
        return c, c.sup, c.ellipticity, 1.0
    if kind == "holder":
        beta = float(params.get("beta", 0.5))
        c = HolderDiag(float(params.get("s0", 1.0)), float(params.get("c", 1.0)), beta, rows, cols)
        return c, c.sup, c.ellipticity, beta
    raise ValueError(f"unknown diffusion kind {kind!r}; expected one of {DIFFUSION_KINDS}")


def build_coefficients(spec: dict, d: int = 1, m: int = 1, horizon: float = 1.0) -> CoefficientSet:
    """Build a :class:`CoefficientSet` from ``{drift: {kind, params}, sigma: ..., sigma_bar: ...}``."""
    drift_spec = spec.get("drift", {"kind": "zero"})
    sigma_spec = spec.get("sigma", {"kind": "constant", "params": {"value": 1.0}})
    sbar_spec = spec.get("sigma_bar", {"kind": "zero"})
    drift, b_sup = build_drift(drift_spec["kind"], drift_spec.get("params", {}), d)
    sigma, s_sup, kappa, beta_s = build_diffusion(sigma_spec["kind"], sigma_spec.get("params", {}), d, d, horizon)
    sbar, sb_sup, _, beta_b = build_diffusion(sbar_spec["kind"], sbar_spec.get("params", {}), d, m, horizon)
    return CoefficientSet(
        drift,
        sigma,
        sbar,
        d=d,
        m=m,
        b_sup=b_sup,
        sigma_sup=s_sup,
        sigma_bar_sup=sb_sup,
        kappa=kappa,
        beta=min(beta_s, beta_b),
        spec={"drift": drift_spec, "sigma": sigma_spec, "sigma_bar": sbar_spec},
    )
