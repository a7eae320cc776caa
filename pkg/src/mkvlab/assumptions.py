"""Diagnostics for the standing assumptions on the coefficients.

These are falsification tools: they sample inputs and report the worst case
seen, they cannot certify an assumption.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .coeffs import CoefficientSet
from .measure import WeightedSampleMeasure


def w1_distance(mu: WeightedSampleMeasure, nu: WeightedSampleMeasure) -> float:
    """Exact Wasserstein-1 distance between two discrete measures on the line."""
    if mu.d != 1 or nu.d != 1:
        raise NotImplementedError("w1_distance is only implemented for d = 1")
    if mu.batch_shape or nu.batch_shape:
        raise ValueError("w1_distance expects unbatched measures")
    return float(
        stats.wasserstein_distance(
            mu.points[:, 0],
            nu.points[:, 0],
            np.broadcast_to(mu.weights, (mu.size,)),
            np.broadcast_to(nu.weights, (nu.size,)),
        )
    )


@dataclass
class EllipticityReport:
    min_quotient: float
    kappa: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.min_quotient >= self.kappa - 1e-12


def check_ellipticity(cs: CoefficientSet, samples: Iterable, kappa: float | None = None) -> EllipticityReport:
    """Minimum of z^T sigma sigma^T z / |z|^2 over sampled ``(t, x, mu, z)`` tuples."""
    kappa = cs.kappa if kappa is None else kappa
    worst = np.inf
    count = 0
    for t, x, mu, z in samples:
        x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, cs.d)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        s = cs.sigma(t, x, mu)[0]
        sz = s.T @ z
        worst = min(worst, float(sz @ sz / (z @ z)))
        count += 1
    return EllipticityReport(worst, float(kappa), count)


@dataclass
class HolderReport:
    max_ratio: float
    C: float
    beta: float
    worst_pair: tuple | None = None
    samples: int = 0

    @property
    def passed(self) -> bool:
        return self.max_ratio <= self.C * (1 + 1e-12)


def check_holder(cs: CoefficientSet, pairs: Iterable, C: float, beta: float | None = None) -> HolderReport:
    """Largest |sigma_t(x, mu) - sigma_t(x', mu')| / (|x - x'|^beta + W1(mu, mu')^beta) over pairs.

    ``pairs`` yields ``((t, x, mu), (x2, mu2))``. The matrix difference uses
    the Frobenius norm. For d > 1 the two measures must be the same object.
    """
    beta = cs.beta if beta is None else beta
    worst, worst_pair, count = 0.0, None, 0
    for (t, x, mu), (x2, mu2) in pairs:
        x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, cs.d)
        x2 = np.atleast_1d(np.asarray(x2, dtype=float)).reshape(1, cs.d)
        if mu is mu2:
            w = 0.0
        elif cs.d == 1:
            w = w1_distance(mu, mu2)
        else:
            raise NotImplementedError("for d > 1 the pair must share its measure")
        denom = float(np.linalg.norm(x - x2)) ** beta + w**beta
        if denom == 0:
            continue
        diff = np.linalg.norm(cs.sigma(t, x, mu)[0] - cs.sigma(t, x2, mu2)[0])
        ratio = float(diff / denom)
        count += 1
        if ratio > worst:
            worst, worst_pair = ratio, (x.ravel().tolist(), x2.ravel().tolist(), w)
    return HolderReport(worst, float(C), float(beta), worst_pair, count)


def random_measure(rng: np.random.Generator, d: int = 1, size: int = 8, scale: float = 2.0) -> WeightedSampleMeasure:
    """A random discrete probability measure with Dirichlet weights."""
    pts = rng.normal(scale=scale, size=(size, d))
    w = rng.dirichlet(np.ones(size))
    w = w / w.sum()
    return WeightedSampleMeasure(pts, w)


def sample_tuples(rng: np.random.Generator, d: int, count: int, horizon: float = 1.0) -> list:
    """Random ``(t, x, mu, z)`` tuples for :func:`check_ellipticity`."""
    out = []
    for _ in range(count):
        out.append((rng.uniform(0, horizon), rng.normal(scale=3, size=d), random_measure(rng, d), rng.normal(size=d)))
    return out


@dataclass
class ContinuityReport:
    ks: list
    gaps: list
    decreasing: bool
    final_gap: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ks": list(self.ks), "gaps": [float(g) for g in self.gaps], "decreasing": self.decreasing,
                "final_gap": self.final_gap, **self.extra}


def narrow_local_continuity_test(
    b: Callable[[np.ndarray, WeightedSampleMeasure], np.ndarray],
    mu: WeightedSampleMeasure,
    sequence: Sequence[WeightedSampleMeasure],
    K_points: np.ndarray,
    ks: Sequence | None = None,
) -> ContinuityReport:
    """Sup over the probe points of |b(x, mu_k) - b(x, mu)| along a sequence mu_k.

    ``b(x, mu)`` maps ``(N, d)`` points to ``(N,)`` values. The verdict
    ``decreasing`` is strict monotone decrease of the gap sequence.
    """
    K_points = np.asarray(K_points, dtype=float)
    if K_points.ndim == 1:
        K_points = K_points[:, None]
    ref = np.asarray(b(K_points, mu), dtype=float)
    gaps = [float(np.max(np.abs(np.asarray(b(K_points, mk), dtype=float) - ref))) for mk in sequence]
    ks = list(range(1, len(gaps) + 1)) if ks is None else list(ks)
    decreasing = all(g2 < g1 for g1, g2 in zip(gaps, gaps[1:]))
    return ContinuityReport(ks, gaps, decreasing, gaps[-1] if gaps else float("nan"))


def uniform_grid_measure(a: float = 0.0, b: float = 1.0, size: int = 100_000) -> WeightedSampleMeasure:
    """Equal-weight midpoint grid approximating Uniform[a, b]."""
    pts = a + (b - a) * (np.arange(size) + 0.5) / size
    return WeightedSampleMeasure.empirical(pts)


def indicator_sandwich(R: float = 1.0, ks=(100, 1000, 10_000), seeds: int = 20, master_seed: int = 0,
                       K=(-2.0, 2.0), probe_points: int = 8001) -> ContinuityReport:
    """Indicator drift with a Uniform[0, 1] target and empirical approximations of size k.

    Gaps are medians over ``seeds`` independent draws.
    """
    from .coeffs import drift_indicator

    def b(x, m):
        return drift_indicator(x, m, R)

    target = uniform_grid_measure()
    probe = np.linspace(K[0], K[1], probe_points)
    table = np.empty((seeds, len(ks)))
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(s,)))
        seq = [WeightedSampleMeasure.empirical(rng.uniform(size=k)) for k in ks]
        table[s] = narrow_local_continuity_test(b, target, seq, probe, ks).gaps
    med = np.median(table, axis=0)
    decreasing = bool(np.all(np.diff(med) < 0))
    return ContinuityReport(list(ks), med.tolist(), decreasing, float(med[-1]),
                            extra={"seeds": seeds, "R": R, "K": list(K), "per_seed": table.tolist()})
