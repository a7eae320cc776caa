"""Density regularity numerics: gridded densities, L^r and Bessel norms, decay fits.

Fourier convention: unitary transform in angular frequency, so the Bessel
multiplier is (1 + |xi|^2)^{s/2} with ``xi = 2 pi * fftfreq``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .sim import EmpiricalFlowEnsemble, GridAlignmentError, mixture_density, predictor_covariances, predictor_paths

MASS_TOL = 1e-3


class MassWarning(UserWarning):
    pass


class AliasingWarning(UserWarning):
    pass


class DensityError(ValueError):
    pass


def _trap_weights(count: int, h: float) -> np.ndarray:
    w = np.full(count, h)
    if count > 1:
        w[0] = w[-1] = h / 2
    return w


@dataclass
class GridDensity:
    """A nonnegative function on a uniform box grid ``origin + spacing * index``."""

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    check_mass: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        d = self.values.ndim
        self.origin = np.broadcast_to(np.asarray(self.origin, dtype=float), (d,)).copy()
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), (d,)).copy()
        if np.any(self.values < 0):
            raise DensityError("density values must be nonnegative")
        if self.check_mass and abs(self.mass - 1) > MASS_TOL:
            warnings.warn(f"grid density has mass {self.mass:.6f}", MassWarning, stacklevel=2)

    @classmethod
    def from_function(cls, f, lo, hi, counts, check_mass: bool = True) -> "GridDensity":
        """Sample ``f`` (mapping ``(P, d)`` points to values) on a box grid."""
        lo = np.atleast_1d(np.asarray(lo, float))
        hi = np.atleast_1d(np.asarray(hi, float))
        counts = np.broadcast_to(np.asarray(counts, int), lo.shape)
        grid = cls(lo, (hi - lo) / (counts - 1), np.zeros(tuple(counts)), check_mass=False)
        grid.values = np.asarray(f(grid.points()), float).reshape(tuple(counts))
        grid.check_mass = check_mass
        grid.__post_init__()
        return grid

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def counts(self) -> tuple:
        return self.values.shape

    def axes(self) -> list[np.ndarray]:
        return [o + h * np.arange(c) for o, h, c in zip(self.origin, self.spacing, self.counts)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.d)

    def cell_weights(self) -> np.ndarray:
        w = np.ones(())
        for c, h in zip(self.counts, self.spacing):
            w = np.multiply.outer(w, _trap_weights(c, h))
        return w

    def integral(self, values: np.ndarray | None = None) -> float:
        v = self.values if values is None else values
        return float(np.sum(v * self.cell_weights()))

    @property
    def mass(self) -> float:
        return self.integral()

    def as_measure(self):
        """The normalized trapezoid quadrature measure of the density."""
        from .measure import WeightedSampleMeasure

        w = (self.values * self.cell_weights()).ravel()
        return WeightedSampleMeasure(self.points(), w / w.sum())


def lr_norm(p: GridDensity, r: float) -> float:
    """Trapezoid approximation of (int |p|^r dx)^{1/r}."""
    if r < 1:
        raise ValueError("r must be at least 1")
    return p.integral(np.abs(p.values) ** r) ** (1.0 / r)


def _fft_size(count: int, h: float, minimum: int | None, tail: float) -> int:
    need = max(2 * count, count + 2 * int(np.ceil(tail / h)))
    if minimum:
        need = max(need, minimum)
    return 1 << int(np.ceil(np.log2(need)))


def bessel_transform(p: GridDensity, s: float, fft_size=None, homogeneous: bool = False,
                     tail: float = 20.0) -> tuple[np.ndarray, np.ndarray]:
    """J^s p on a zero-padded periodic grid; returns ``(values, spacing)``.

    With ``homogeneous=True`` the multiplier is |xi|^s instead of <xi>^s.
    """
    sizes = []
    for k, (c, h) in enumerate(zip(p.counts, p.spacing)):
        want = fft_size[k] if isinstance(fft_size, (list, tuple)) else fft_size
        sizes.append(_fft_size(c, h, want, tail))
    padded = np.zeros(sizes)
    padded[tuple(slice(0, c) for c in p.counts)] = p.values
    F = np.fft.fftn(padded, norm="ortho")
    xi2 = np.zeros(sizes)
    for k, (n, h) in enumerate(zip(sizes, p.spacing)):
        xi = 2 * np.pi * np.fft.fftfreq(n, h)
        shape = [1] * len(sizes)
        shape[k] = n
        xi2 = xi2 + (xi**2).reshape(shape)
    mult = xi2 ** (s / 2) if homogeneous else (1 + xi2) ** (s / 2)
    peak = np.max(np.abs(F))
    edge = _nyquist_band(np.abs(F))
    if peak > 0 and edge > 1e-4 * peak:
        warnings.warn(f"Fourier tail {edge / peak:.2e} of peak; refine the grid", AliasingWarning, stacklevel=2)
    out = np.fft.ifftn(F * mult, norm="ortho").real
    return out, p.spacing


def _nyquist_band(absF: np.ndarray) -> float:
    band = 0.0
    for k, n in enumerate(absF.shape):
        idx = [slice(None)] * absF.ndim
        idx[k] = slice(n // 2 - max(1, n // 16), n // 2 + max(1, n // 16))
        band = max(band, float(np.max(absF[tuple(idx)])))
    return band


def bessel_norm(p: GridDensity, r: float, s: float, fft_size=None, homogeneous: bool = False) -> float:
    """||J^s p||_{L^r}, the Bessel potential norm H_r^s of the gridded density."""
    vals, h = bessel_transform(p, s, fft_size, homogeneous)
    return float((np.sum(np.abs(vals) ** r) * np.prod(h)) ** (1.0 / r))


def gaussian_grid(eps: float, d: int = 1, per_sd: int = 32, half_width_sd: float = 10.0) -> GridDensity:
    """N(0, eps I) sampled on a grid scaled to its standard deviation."""
    sd = np.sqrt(eps)
    count = int(2 * half_width_sd * per_sd) + 1
    lo = -half_width_sd * sd * np.ones(d)
    hi = -lo

    def f(y):
        return np.exp(-np.sum(y * y, axis=-1) / (2 * eps)) / (2 * np.pi * eps) ** (d / 2)

    return GridDensity.from_function(f, lo, hi, count)


# Density estimation


@dataclass
class DensityGrid:
    lo: np.ndarray
    hi: np.ndarray
    counts: tuple

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.counts) - 1)


def _auto_grid(means: np.ndarray, covs: np.ndarray) -> DensityGrid:
    d = means.shape[-1]
    var = np.einsum("...ii->...i", covs).reshape(-1, d)
    sd_max = np.sqrt(var.max(axis=0))
    sd_min = np.sqrt(var.min(axis=0))
    pts = means.reshape(-1, d)
    lo = pts.min(axis=0) - 8 * sd_max
    hi = pts.max(axis=0) + 8 * sd_max
    if d == 1:
        count = int(min(2**15, max(257, np.ceil((hi - lo)[0] / (sd_min[0] / 8)) + 1)))
        return DensityGrid(lo, hi, (count,))
    per = int(min(129, max(33, np.ceil(np.max((hi - lo) / (sd_min / 3))))))
    return DensityGrid(lo, hi, (per,) * d)


def _mixture_1d(axis: np.ndarray, means: np.ndarray, var: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-row 1-d Gaussian mixtures evaluated on ``axis``, truncated at 9 sd.

    ``means``, ``var`` and ``weights`` have shape ``(G, K)``; returns ``(G, len(axis))``.
    """
    G, K = means.shape
    h = axis[1] - axis[0]
    sd = np.sqrt(var)
    W = int(np.ceil(18 * sd.max() / h)) + 2
    out = np.zeros((G, len(axis)))
    budget = max(1, 4_000_000 // (K * W))
    offs = np.arange(W)
    for a in range(0, G, budget):
        m, v, w = means[a:a + budget], var[a:a + budget], weights[a:a + budget]
        start = np.floor((m - 9 * sd.max() - axis[0]) / h).astype(int)
        idx = start[..., None] + offs  # (g, K, W)
        y = axis[0] + idx * h
        vals = w[..., None] * np.exp(-0.5 * (y - m[..., None]) ** 2 / v[..., None]) / np.sqrt(2 * np.pi * v[..., None])
        ok = (idx >= 0) & (idx < len(axis))
        rows = np.broadcast_to(np.arange(m.shape[0])[:, None, None], idx.shape)
        flat = rows[ok] * len(axis) + idx[ok]
        out[a:a + budget] = np.bincount(flat, weights=vals[ok], minlength=m.shape[0] * len(axis)).reshape(-1, len(axis))
    return out


@dataclass
class DensityEstimate:
    """Pooled density and the per-replication mixture densities it averages."""

    density: GridDensity
    per_replication: np.ndarray  # (R, *counts)


def estimate_density_replicated(ens: EmpiricalFlowEnsemble, t: float, eps: float,
                                grid: DensityGrid | None = None, min_substeps: int = 4) -> DensityEstimate:
    """Single-particle marginal density at time t via the one-step Gaussian predictor.

    Every particle of every replication contributes a normal component with
    mean X_{t-eps} and the frozen-coefficient covariance.
    """
    if eps < min_substeps * ens.dt * (1 - 1e-9):
        raise GridAlignmentError(f"eps = {eps} is below the floor {min_substeps} * dt = {min_substeps * ens.dt}")
    good = ens.good
    means, covs = predictor_covariances(ens, t, eps, reps=good)
    d = ens.d
    eig = np.linalg.eigvalsh(covs.reshape(-1, d, d))
    if not np.all(eig > 1e-14):
        raise DensityError("predictor covariance is not positive definite; the diffusion is degenerate")
    grid = grid or _auto_grid(means, covs)
    R, n = means.shape[:2]
    w = np.full((R, n), 1.0 / n)
    if d == 1:
        axis = np.linspace(grid.lo[0], grid.hi[0], grid.counts[0])
        per = _mixture_1d(axis, means[..., 0], covs[..., 0, 0], w)
    else:
        pts = GridDensity(grid.lo, grid.spacing, np.zeros(grid.counts), check_mass=False).points()
        per = np.stack([
            mixture_density(pts, means[r], covs[r], w[r]) for r in range(R)
        ]).reshape((R,) + tuple(grid.counts))
    pooled = np.mean(per, axis=0)
    dens = GridDensity(grid.lo, grid.spacing, pooled, check_mass=False)
    if abs(dens.mass - 1) > MASS_TOL:
        raise DensityError(f"grid captures mass {dens.mass:.6f}; enlarge the grid")
    return DensityEstimate(dens, per)


def estimate_density(ens: EmpiricalFlowEnsemble, t: float, eps: float, grid: DensityGrid | None = None) -> GridDensity:
    return estimate_density_replicated(ens, t, eps, grid).density


# Fits


@dataclass
class DecayFit:
    abscissae: list
    ordinates: list
    ses: list
    exponent: float
    ci: tuple
    target: float | None = None
    label: str = ""

    def to_dict(self) -> dict:
        return {"abscissae": list(map(float, self.abscissae)), "ordinates": list(map(float, self.ordinates)),
                "ses": list(map(float, self.ses)), "exponent": self.exponent, "ci": list(self.ci),
                "target": self.target, "label": self.label}

    def to_csv(self, path, config_hash: str = "") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["abscissa", "ordinate", "se", "config_hash"])
            for a, o, s in zip(self.abscissae, self.ordinates, self.ses):
                w.writerow([repr(float(a)), repr(float(o)), repr(float(s)), config_hash])

    def summary_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def loglog_slope(x, y) -> tuple[float, float]:
    res = stats.linregress(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)))
    return float(res.slope), float(res.stderr)


def coupling_rate(ens: EmpiricalFlowEnsemble, t: float, eps_list: Sequence[float], q: float = 2.0,
                  target: float | None = None) -> DecayFit:
    """L^q distance between X_t and the one-step predictor Y_t for each eps, with a log-log exponent fit."""
    if len(eps_list) < 4:
        raise ValueError("an exponent fit needs at least four eps values")
    j = ens.index(t)
    good = ens.good
    norms, ses = [], []
    for eps in eps_list:
        gap = ens.X[good, j] - predictor_paths(ens, t, eps)[good]
        per_rep = np.mean(np.sum(gap * gap, axis=-1) ** (q / 2), axis=1)
        m = float(np.mean(per_rep))
        norms.append(m ** (1 / q))
        se_m = float(np.std(per_rep, ddof=1) / np.sqrt(len(per_rep)))
        ses.append(se_m / (q * m ** (1 - 1 / q)) if m > 0 else 0.0)
    if max(norms) == 0:
        return DecayFit(list(eps_list), norms, ses, float("inf"), (float("inf"), float("inf")), target, "coupling")
    slope, se = loglog_slope(eps_list, norms)
    return DecayFit(list(eps_list), norms, ses, slope, (slope - 2 * se, slope + 2 * se), target, "coupling")


@dataclass(frozen=True)
class InterpolationParams:
    d: int
    r: float
    s: float
    xi: float
    eps0: float = 1.0

    @property
    def r_conj(self) -> float:
        return self.r / (self.r - 1)

    @property
    def gamma(self) -> float:
        return (self.d / self.r_conj + self.s) / 2

    @property
    def u(self) -> float:
        return 1 + self.d / self.r_conj

    @property
    def feasible(self) -> bool:
        return 1 < self.r < 2 and self.s > 0 and self.gamma < 1

    def to_dict(self) -> dict:
        return {"d": self.d, "r": self.r, "r_conj": self.r_conj, "s": self.s, "xi": self.xi, "gamma": self.gamma,
                "u": self.u, "eps0": self.eps0, "feasible": self.feasible}


def select_interpolation(d: int, xi: float, delta0: float = 0.1, eps0: float = 1.0) -> InterpolationParams:
    """r' = max(2 + delta0, 2d), s = (2 - d/r') / 2, so gamma = (d/r' + s) / 2 < 1."""
    if d < 1 or xi <= 0:
        raise ValueError("need d >= 1 and xi > 0")
    rc = max(2 + delta0, 2 * d)
    return InterpolationParams(d, rc / (rc - 1), 0.5 * (2 - d / rc), xi, eps0)


def interpolation_bound(params: InterpolationParams, c_a: float, c_e: float, eps0: float | None = None) -> float:
    """c_a eps0^{-(d/r' + s)/2} + c_e eps0^{(1 + xi)/2}, modulo an unknown outer constant."""
    e = params.eps0 if eps0 is None else eps0
    return float(c_a * e ** (-params.gamma) + c_e * e ** ((1 + params.xi) / 2))


@dataclass
class BlowupReport:
    fits: dict  # n -> DecayFit
    overlap: bool
    r: float

    @property
    def passed(self) -> bool:
        return all(f.exponent < 1 for f in self.fits.values()) and self.overlap

    def to_dict(self) -> dict:
        return {"fits": {str(k): v.to_dict() for k, v in self.fits.items()}, "overlap": self.overlap, "r": self.r,
                "pass": self.passed}


def blowup_curve(ens: EmpiricalFlowEnsemble, t_list: Sequence[float], r: float = 2.0, eps_max: float = 1 / 16,
                 bootstrap: int = 200, seed: int = 0) -> DecayFit:
    """||p^{1,n}(t)||_{L^r} on ``t_list`` and the fitted exponent gamma-hat of c t^{-gamma}.

    The CI comes from a bootstrap over replications, resampled jointly across t.
    """
    rng = np.random.default_rng(seed)
    good = len(ens.good)
    idx = rng.integers(0, good, size=(bootstrap, good))
    counts = np.stack([np.bincount(row, minlength=good) for row in idx]).astype(float) / good
    norms, boot = [], []
    for t in t_list:
        est = estimate_density_replicated(ens, t, min(t, eps_max))
        p = est.density
        norms.append(lr_norm(p, r))
        flat = est.per_replication.reshape(good, -1)
        bvals = counts @ flat
        cw = p.cell_weights().ravel()
        boot.append(np.sum(np.abs(bvals) ** r * cw, axis=1) ** (1 / r))
    boot = np.asarray(boot)  # (len(t), B)
    slope, _ = loglog_slope(t_list, norms)
    lt = np.log(np.asarray(t_list, float))
    lt_c = lt - lt.mean()
    bslopes = (lt_c @ np.log(boot)) / (lt_c @ lt_c)
    lo, hi = np.percentile(-bslopes, [2.5, 97.5])
    ses = np.std(boot, axis=1, ddof=1).tolist()
    return DecayFit(list(t_list), norms, ses, -slope, (float(lo), float(hi)), None, f"blowup n={ens.n}")


def blowup_fit(ensembles: Sequence[EmpiricalFlowEnsemble], t_list: Sequence[float], r: float = 2.0,
               eps_max: float = 1 / 16, bootstrap: int = 200, seed: int = 0) -> BlowupReport:
    """Blow-up exponent per particle count and whether the bootstrap CIs overlap across n."""
    if len(t_list) < 4:
        raise ValueError("an exponent fit needs at least four times")
    if max(t_list) > min(e.config.T for e in ensembles) or min(t_list) <= 0:
        raise ValueError("times must lie in (0, T]")
    fits = {e.n: blowup_curve(e, t_list, r, eps_max, bootstrap, seed) for e in ensembles}
    lo = max(f.ci[0] for f in fits.values())
    hi = min(f.ci[1] for f in fits.values())
    return BlowupReport(fits, bool(lo <= hi), r)
