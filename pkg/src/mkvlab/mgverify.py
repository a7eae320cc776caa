"""Monte Carlo checks that simulated empirical measure flows solve the martingale problem.

The central object is the residual

    M_{t_j}[phi] = Lambda_{t_j}[phi] - phi(x0) - sum_{l < j} A_{t_l}(Lambda_{t_l})[phi] dt,

a discrete martingale for the Euler scheme. Its increments must be
uncorrelated with bounded functionals of the past, and its quadratic
variation must match the integral of Q + C / n.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .functions import TestFunction, gaussian, odd_gaussian
from .hermite import seminorm_m_star
from .ops import OperatorContext, characteristics
from .sim import EmpiricalFlowEnsemble, eval_measure_series

_PAIR_BUDGET = 4_000_000


@dataclass
class CharacteristicSeries:
    """Lambda[phi], A[phi], Q[phi, phi], C[phi, phi] on the grid, each ``(R, steps + 1)``."""

    Lam: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray


def characteristic_series(ens: EmpiricalFlowEnsemble, phi: TestFunction) -> CharacteristicSeries:
    R, S = ens.R, ens.steps + 1
    A, Q, C = (np.empty((R, S)) for _ in range(3))
    chunk = max(1, _PAIR_BUDGET // (ens.n * ens.n))
    times = ens.times
    for j in range(S):
        ctx = OperatorContext(ens.cs, float(times[j]))
        for a in range(0, R, chunk):
            reps = slice(a, min(a + chunk, R))
            with np.errstate(all="ignore"):
                cv = characteristics(ctx, ens.measure(j, reps), phi)
            A[reps, j], Q[reps, j], C[reps, j] = cv.A, cv.Q, cv.C
    return CharacteristicSeries(eval_measure_series(ens, phi), A, Q, C)


@dataclass
class MartingalePath:
    times: np.ndarray
    values: np.ndarray  # (steps + 1,) for one replication or (R, steps + 1)
    phi_name: str = ""


def residual_from_series(series: CharacteristicSeries, dt: float) -> np.ndarray:
    """M from a characteristic series; the empirical measure at time 0 is the point mass at x0."""
    drift = np.zeros_like(series.A)
    drift[:, 1:] = np.cumsum(series.A[:, :-1], axis=1) * dt
    M = series.Lam - series.Lam[:, :1] - drift
    M[:, 0] = 0.0
    return M


def compute_M_all(ens: EmpiricalFlowEnsemble, phi: TestFunction) -> np.ndarray:
    return residual_from_series(characteristic_series(ens, phi), ens.dt)


def compute_M(ens: EmpiricalFlowEnsemble, r: int, phi: TestFunction) -> MartingalePath:
    sub = EmpiricalFlowEnsemble(ens.config, ens.cs, ens.X[r:r + 1], ens.Z[r:r + 1])
    return MartingalePath(ens.times, compute_M_all(sub, phi)[0], phi.name)


def m_uniform_bound(ens: EmpiricalFlowEnsemble, phi: TestFunction, slack: float = 0.05) -> float:
    """(2 + T c_{b,sigma,sigma_bar}) ||phi||_2^* (1 + slack)."""
    return float((2 + ens.config.T * ens.cs.drift_constant) * seminorm_m_star(phi, 2) * (1 + slack))


@dataclass
class PastFunctional:
    """g = shape(scale * sum_i c_i Lambda_{s_i}[phi_i] + offset), bounded by 1.

    ``shape`` is ``tanh``, ``arctan`` (rescaled by 2/pi) or ``zero``.
    """

    anchors: list  # [(time, TestFunction, coefficient)]
    shape: str = "tanh"
    scale: float = 1.0
    offset: float = 0.0
    name: str = ""

    bound = 1.0

    @property
    def latest(self) -> float:
        return max((a[0] for a in self.anchors), default=0.0)

    def evaluate(self, ens: EmpiricalFlowEnsemble, cache: dict | None = None) -> np.ndarray:
        if self.shape == "zero":
            return np.zeros(ens.R)
        z = np.full(ens.R, self.offset)
        for s, phi, c in self.anchors:
            j = ens.index(s)
            lam = None if cache is None else cache.get(phi.name)
            col = lam[:, j] if lam is not None else eval_measure_series(ens, phi)[:, j]
            z = z + c * col
        z = self.scale * z
        if self.shape == "tanh":
            return np.tanh(z)
        if self.shape == "arctan":
            return 2 / np.pi * np.arctan(z)
        raise ValueError(f"unknown shape {self.shape!r}")


@dataclass
class ResidualResult:
    phi_id: str
    s: float
    t: float
    g_id: str
    stat: float
    se: float
    z: float

    @property
    def passed(self) -> bool:
        return abs(self.stat) <= self.z * self.se

    def to_dict(self) -> dict:
        return {"phi_id": self.phi_id, "s": self.s, "t": self.t, "g_id": self.g_id, "stat": self.stat,
                "se": self.se, "z": self.z, "pass": self.passed}


def residual_test(ens: EmpiricalFlowEnsemble, phi: TestFunction, s: float, t: float, g: PastFunctional,
                  z: float = 3.0, M: np.ndarray | None = None, g_values: np.ndarray | None = None) -> ResidualResult:
    """Mean over replications of (M_t - M_s) g with its standard error.

    ``g`` must be anchored no later than min(s, t). Swapping s and t flips
    the sign of the statistic exactly.
    """
    if g.latest > min(s, t) + 1e-12:
        raise ValueError("the past functional looks beyond min(s, t)")
    js, jt = ens.index(s), ens.index(t)
    M = compute_M_all(ens, phi) if M is None else M
    gv = g.evaluate(ens) if g_values is None else g_values
    good = ens.good
    prod = (M[good, jt] - M[good, js]) * gv[good]
    stat = float(np.mean(prod))
    se = float(np.std(prod, ddof=1) / np.sqrt(len(prod))) if len(prod) > 1 else 0.0
    return ResidualResult(phi.name, float(s), float(t), g.name, stat, se, float(z))


# QV


class QVMismatchError(ValueError):
    """Realized quadratic variation is nonzero while the prediction vanishes."""


@dataclass
class QVReport:
    realized_mean: float
    predicted_mean: float
    ratio: float
    gap: float
    realized_se: float
    n: int
    realized: np.ndarray = field(repr=False, default=None)
    predicted: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"realized_mean": self.realized_mean, "predicted_mean": self.predicted_mean, "ratio": self.ratio,
                "gap": self.gap, "realized_se": self.realized_se, "n": self.n}


def qv_from_series(series: CharacteristicSeries, dt: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    M = residual_from_series(series, dt)
    realized = np.sum(np.diff(M, axis=1) ** 2, axis=1)
    predicted = np.sum(series.Q[:, :-1] + series.C[:, :-1] / n, axis=1) * dt
    return realized, predicted


def qv_match(ens: EmpiricalFlowEnsemble, phi: TestFunction, n: int | None = None,
             series: CharacteristicSeries | None = None, tol: float = 1e-14) -> QVReport:
    """Realized sum of squared residual increments against the integral of Q + C / n, at T."""
    n = ens.n if n is None else n
    series = characteristic_series(ens, phi) if series is None else series
    realized, predicted = qv_from_series(series, ens.dt, n)
    good = ens.good
    realized, predicted = realized[good], predicted[good]
    rm, pm = float(np.mean(realized)), float(np.mean(predicted))
    se = float(np.std(realized, ddof=1) / np.sqrt(len(realized))) if len(realized) > 1 else 0.0
    if abs(pm) <= tol:
        if abs(rm) <= tol:
            return QVReport(rm, pm, 1.0, 0.0, se, n, realized, predicted)
        raise QVMismatchError(f"predicted quadratic variation is 0 but realized is {rm:.3g}; "
                              "check the coefficient configuration")
    ratio = rm / pm
    return QVReport(rm, pm, ratio, abs(ratio - 1.0), se, n, realized, predicted)


@dataclass
class ScalingFit:
    ns: list
    values: list
    slope: float
    intercept: float
    slope_se: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def loglog_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and slope SE of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    res = stats.linregress(lx, ly)
    return float(res.slope), float(res.intercept), float(res.stderr)


def n_scaling(ensembles: Sequence[EmpiricalFlowEnsemble], phi: TestFunction) -> ScalingFit:
    """Log-log slope of the mean realized QV at T against n."""
    ns = sorted({e.n for e in ensembles})
    if len(ns) < 3:
        raise ValueError("n_scaling needs at least three distinct particle counts")
    by_n = {e.n: e for e in ensembles}
    vals = [qv_match(by_n[n], phi).realized_mean for n in ns]
    slope, icpt, se = loglog_fit(ns, vals)
    return ScalingFit(ns, vals, slope, icpt, se)


# Chaos


def _energy(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    return float(stats.energy_distance(a, b))


def chaos_distances(ensembles: Sequence[EmpiricalFlowEnsemble], phis: Sequence[TestFunction],
                    times: Sequence[float]) -> list:
    """Max over (phi, t) anchors of the energy distance between consecutive-n laws of Lambda_t[phi]."""
    ens = sorted(ensembles, key=lambda e: e.n)
    samples = []
    for e in ens:
        per = {}
        for phi in phis:
            lam = eval_measure_series(e, phi)
            for t in times:
                per[(phi.name, t)] = lam[e.good, e.index(t)]
        samples.append(per)
    out = []
    for a, b in zip(samples, samples[1:]):
        out.append(max(_energy(a[k], b[k]) for k in a))
    return out


@dataclass
class ChaosReport:
    ns: list
    distances: list  # median over seeds
    per_seed: list
    decreasing: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def chaos_trend(groups: Sequence[Sequence[EmpiricalFlowEnsemble]], phis: Sequence[TestFunction],
                times: Sequence[float]) -> ChaosReport:
    """Median over seeds (``groups``, one list of ensembles per seed) of the distance sequence.

    The verdict is strict decrease of the median sequence. This is evidence
    of a trend, not a proof of convergence.
    """
    per_seed = [chaos_distances(g, phis, times) for g in groups]
    med = np.median(np.asarray(per_seed), axis=0)
    ns = sorted(e.n for e in groups[0])
    return ChaosReport(ns, med.tolist(), per_seed, bool(np.all(np.diff(med) < 0)))


# Battery


def default_phis(d: int = 1) -> list[TestFunction]:
    return [
        gaussian(d, 0.0, 1.0),
        gaussian(d, 0.5, 0.7),
        odd_gaussian(d, 0, 0.0, 1.0),
    ]


def default_windows(T: float = 1.0) -> list[tuple[float, float]]:
    return [(0.25 * T, 0.5 * T), (0.5 * T, 0.75 * T), (0.25 * T, T), (0.5 * T, T)]


def default_functionals(phis: Sequence[TestFunction], s: float, phi: TestFunction) -> list[PastFunctional]:
    other = phis[1] if phis[0] is phi else phis[0]
    return [
        PastFunctional([(s, phi, 1.0)], "tanh", name="tanh"),
        PastFunctional([(s / 2, other, 1.0), (s, phi, -1.0)], "arctan", scale=4.0, name="arctan"),
    ]


@dataclass
class VerifyReport:
    tests: list
    battery_pass_rate: float
    config_hash: str = ""
    threshold: float = 0.95
    z: float = 3.0
    n_failed_replications: int = 0

    @property
    def passed(self) -> bool:
        return self.battery_pass_rate >= self.threshold

    def to_dict(self) -> dict:
        return {
            "tests": [t.to_dict() for t in self.tests],
            "battery_pass_rate": self.battery_pass_rate,
            "config_hash": self.config_hash,
            "multiple_testing": {"method": "per-test z with battery pass-rate threshold", "z": self.z,
                                 "threshold": self.threshold},
            "n_failed_replications": self.n_failed_replications,
            "pass": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def run_battery(ens: EmpiricalFlowEnsemble, phis: Sequence[TestFunction] | None = None,
                windows: Sequence[tuple[float, float]] | None = None, z: float = 3.0,
                threshold: float = 0.95, config_hash: str = "") -> VerifyReport:
    """Residual tests over every (phi, window, g) combination; 3 x 4 x 2 = 24 by default."""
    phis = list(phis or default_phis(ens.d))
    windows = list(windows or default_windows(ens.config.T))
    series = {phi.name: characteristic_series(ens, phi) for phi in phis}
    Ms = {k: residual_from_series(v, ens.dt) for k, v in series.items()}
    lam_cache = {k: v.Lam for k, v in series.items()}
    tests = []
    for phi in phis:
        for s, t in windows:
            for g in default_functionals(phis, s, phi):
                gv = g.evaluate(ens, lam_cache)
                tests.append(residual_test(ens, phi, s, t, g, z, M=Ms[phi.name], g_values=gv))
    rate = float(np.mean([t.passed for t in tests]))
    return VerifyReport(tests, rate, config_hash, threshold, z, ens.n_failed)


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
