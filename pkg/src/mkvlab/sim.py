"""Euler-Maruyama simulation of the n-particle system with common noise.

Seeding contract
----------------
Replication ``r`` draws from two independent PCG64 streams derived from
``SeedSequence(master_seed, spawn_key=(r, stream))``:

* ``stream = 0``: the common Brownian increments dZ, shape ``(steps, m)``;
* ``stream = 1``: the idiosyncratic increments dB, drawn particle-major as
  ``(n, steps, d)``.

Because the idiosyncratic stream is filled particle by particle, particle
``i`` receives the same increments for every ``n > i``, and the common-noise
path does not depend on ``n`` at all. This couples runs across particle
counts with common random numbers. Replications are simulated in fixed
blocks with elementwise arithmetic only, so results are bit-identical for
any number of workers.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .coeffs import CoefficientSet
from .functions import TestFunction
from .measure import WeightedSampleMeasure, order_free_sum

BLOCK = 50
COMMON, IDIOSYNCRATIC = 0, 1


class EllipticityWarning(UserWarning):
    """Raised for runs with a degenerate idiosyncratic diffusion."""


class GridAlignmentError(ValueError):
    pass


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(100, ge=1)
    d: int = Field(1, ge=1)
    m: int = Field(1, ge=1)
    T: float = Field(1.0, gt=0)
    steps: int = Field(256, ge=1)
    x0: list[float] = Field(default_factory=lambda: [0.0])
    replications: int = Field(100, ge=1)
    master_seed: int = Field(0, ge=0, lt=2**64)
    store_noise: bool = False

    @field_validator("x0", mode="before")
    @classmethod
    def _scalar_x0(cls, v):
        if isinstance(v, (int, float)):
            return [float(v)]
        return v

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.T * np.arange(self.steps + 1) / self.steps

    def start(self) -> np.ndarray:
        x0 = np.asarray(self.x0, dtype=float)
        if x0.size == 1:
            return np.full(self.d, x0[0])
        if x0.size != self.d:
            raise ValueError(f"x0 has {x0.size} entries, expected {self.d}")
        return x0


def replication_streams(master_seed: int, r: int) -> tuple[np.random.Generator, np.random.Generator]:
    """The (common, idiosyncratic) generators of replication ``r``."""
    mk = lambda stream: np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(r, stream))))
    return mk(COMMON), mk(IDIOSYNCRATIC)


def _noise(cfg: SimConfig, reps: range):
    sq = np.sqrt(cfg.dt)
    dZ = np.empty((len(reps), cfg.steps, cfg.m))
    dB = np.empty((len(reps), cfg.n, cfg.steps, cfg.d))
    for k, r in enumerate(reps):
        gc, gi = replication_streams(cfg.master_seed, r)
        dZ[k] = sq * gc.standard_normal((cfg.steps, cfg.m))
        dB[k] = sq * gi.standard_normal((cfg.n, cfg.steps, cfg.d))
    return dZ, dB


def _simulate_block(cfg: SimConfig, cs: CoefficientSet, reps: range):
    dZ, dB = _noise(cfg, reps)
    B, n, d = len(reps), cfg.n, cfg.d
    X = np.empty((B, cfg.steps + 1, n, d))
    X[:, 0] = cfg.start()
    weights = np.full(n, 1.0 / n)
    times = cfg.times
    dt = cfg.dt
    failed_at = np.full(B, -1)
    with np.errstate(all="ignore"):
        for j in range(cfg.steps):
            x = X[:, j]
            mu = WeightedSampleMeasure(x, weights, validate=False)
            t = times[j]
            b = cs.drift(t, x, mu)
            s = cs.sigma(t, x, mu)
            sb = cs.sigma_bar(t, x, mu)
            xn = (
                x
                + b * dt
                + np.sum(s * dB[:, :, j, None, :], axis=-1)
                + np.sum(sb * dZ[:, None, None, j, :], axis=-1)
            )
            bad = ~np.all(np.isfinite(xn), axis=(1, 2))
            newly = bad & (failed_at < 0)
            failed_at[newly] = j + 1
            X[:, j + 1] = xn
    return X, dZ, dB, failed_at


@dataclass
class EmpiricalFlowEnsemble:
    """R realizations of the particle system on the time grid.

    ``X`` has shape ``(R, steps + 1, n, d)`` and ``Z`` (the common Brownian
    path, ``Z_0 = 0``) has shape ``(R, steps + 1, m)``. Replications whose
    state became non-finite are flagged in ``failed`` and excluded by
    :attr:`good`.
    """

    config: SimConfig
    cs: CoefficientSet
    X: np.ndarray
    Z: np.ndarray
    dB: np.ndarray | None = None
    failed: np.ndarray = field(default=None)
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        if self.failed is None:
            self.failed = np.zeros(self.X.shape[0], dtype=bool)

    @property
    def R(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[2]

    @property
    def d(self) -> int:
        return self.X.shape[3]

    @property
    def steps(self) -> int:
        return self.X.shape[1] - 1

    @property
    def dt(self) -> float:
        return self.config.dt

    @property
    def times(self) -> np.ndarray:
        return self.config.times

    @property
    def good(self) -> np.ndarray:
        return np.flatnonzero(~self.failed)

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())

    def index(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid time."""
        j = t / self.dt
        k = int(round(j))
        if abs(j - k) > 1e-9 * max(1.0, abs(j)) or not 0 <= k <= self.steps:
            raise GridAlignmentError(f"time {t} is not on the simulation grid (dt = {self.dt})")
        return k

    def measure(self, j: int, reps=None) -> WeightedSampleMeasure:
        """Batched empirical measures at grid index ``j``."""
        x = self.X[:, j] if reps is None else self.X[reps, j]
        return WeightedSampleMeasure(x, np.full(self.n, 1.0 / self.n), validate=False)

    def permuted(self, perms: np.ndarray) -> "EmpiricalFlowEnsemble":
        """Relabel particles: ``perms`` has shape ``(n,)`` or ``(R, n)``."""
        perms = np.asarray(perms)
        if perms.ndim == 1:
            X = self.X[:, :, perms]
        else:
            X = np.take_along_axis(self.X, perms[:, None, :, None], axis=2)
        return EmpiricalFlowEnsemble(self.config, self.cs, X, self.Z, None, self.failed.copy(), list(self.diagnostics))


def simulate(config: SimConfig, cs: CoefficientSet, workers: int = 1) -> EmpiricalFlowEnsemble:
    """Simulate ``config.replications`` independent copies of the particle system.

    Each step uses the empirical measure at the left endpoint:
    ``X_{j+1} = X_j + b dt + sigma dB_j + sigma_bar dZ_j`` with the same
    ``dZ_j`` for all particles of a replication.
    """
    if cs.d != config.d or cs.m != config.m:
        raise ValueError(f"coefficient set has (d, m) = ({cs.d}, {cs.m}), config has ({config.d}, {config.m})")
    if cs.kappa <= 0:
        warnings.warn("idiosyncratic diffusion is not uniformly elliptic (kappa <= 0)", EllipticityWarning, stacklevel=2)
    R = config.replications
    blocks = [range(a, min(a + BLOCK, R)) for a in range(0, R, BLOCK)]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_block, [config] * len(blocks), [cs] * len(blocks), blocks))
    else:
        results = [_simulate_block(config, cs, blk) for blk in blocks]
    X = np.concatenate([res[0] for res in results])
    dZ = np.concatenate([res[1] for res in results])
    failed_at = np.concatenate([res[3] for res in results])
    Z = np.concatenate([np.zeros((R, 1, config.m)), np.cumsum(dZ, axis=1)], axis=1)
    dB = np.concatenate([res[2] for res in results]).transpose(0, 2, 1, 3) if config.store_noise else None
    failed = failed_at >= 0
    diagnostics = [
        {"replication": int(r), "step": int(failed_at[r]), "reason": "non-finite state"} for r in np.flatnonzero(failed)
    ]
    if diagnostics:
        warnings.warn(f"{len(diagnostics)} replication(s) produced non-finite states and were excluded", RuntimeWarning,
                      stacklevel=2)
    return EmpiricalFlowEnsemble(config, cs, X, Z, dB, failed, diagnostics)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MKVLAB_WORKERS", "1")))
    except ValueError:
        return 1


# Observables


def eval_measure(ens: EmpiricalFlowEnsemble, r: int, t: float, phi: TestFunction) -> float:
    """mu_t^n[phi] = (1/n) sum_i phi(X_t^i) for replication ``r``."""
    j = ens.index(t)
    return float(order_free_sum(phi(ens.X[r, j])) / ens.n)


def eval_measure_series(ens: EmpiricalFlowEnsemble, phi: TestFunction) -> np.ndarray:
    """Lambda_{t_j}[phi] for all replications and grid times, shape ``(R, steps + 1)``."""
    return order_free_sum(phi(ens.X), axis=-1) / ens.n


@dataclass
class MomentReport:
    ns: list
    estimates: list
    ses: list
    q: float
    max_z: float = 0.0
    passed: bool = True

    def to_dict(self) -> dict:
        return {"ns": self.ns, "estimates": self.estimates, "ses": self.ses, "q": self.q, "max_z": self.max_z,
                "pass": self.passed}


def sup_moment(ens: EmpiricalFlowEnsemble, q: float) -> tuple[float, float]:
    """Estimate E[sup_t |X_t^{1,n}|^q] pooling exchangeable particles; SE over replications."""
    if q <= 1:
        raise ValueError("q must exceed 1")
    X = ens.X[ens.good]
    sup = np.max(np.sqrt(np.sum(X * X, axis=-1)), axis=1) ** q  # (R, n)
    per_rep = np.mean(sup, axis=1)
    se = float(np.std(per_rep, ddof=1) / np.sqrt(len(per_rep))) if len(per_rep) > 1 else float("nan")
    return float(np.mean(per_rep)), se


def moment_check(ensembles: Sequence[EmpiricalFlowEnsemble] | EmpiricalFlowEnsemble, q: float,
                 z: float = 3.0) -> MomentReport:
    """Per-n moment estimates; passes when no pair differs by more than ``z`` pooled SEs upward in n."""
    if isinstance(ensembles, EmpiricalFlowEnsemble):
        ensembles = [ensembles]
    ensembles = sorted(ensembles, key=lambda e: e.n)
    est, ses = zip(*(sup_moment(e, q) for e in ensembles))
    max_z = 0.0
    for i in range(len(est)):
        for k in range(i + 1, len(est)):
            pooled = np.hypot(ses[i], ses[k])
            diff = est[k] - est[i]
            if pooled > 0:
                max_z = max(max_z, diff / pooled)
            elif diff > 0:
                max_z = np.inf
    return MomentReport([e.n for e in ensembles], list(est), list(ses), q, float(max_z), bool(max_z <= z))


@dataclass
class ConcentrationReport:
    frequency: float
    bound: float
    upper_ci: float
    lower_ci: float
    K: float
    eps: float
    q: float
    c_q: float

    @property
    def passed(self) -> bool:
        # the bound must not lie below the binomial CI of the frequency
        return self.lower_ci <= self.bound

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["pass"] = self.passed
        return d


def concentration_check(ens: EmpiricalFlowEnsemble, K: float, eps: float, q: float, c_q: float,
                        z: float = 3.0) -> ConcentrationReport:
    """Frequency of {Lambda_t[[-K, K]^d] < 1 - eps for some t} against c_q / (eps K^q)."""
    X = ens.X[ens.good]
    inside = np.all(np.abs(X) <= K, axis=-1)  # (R, steps+1, n)
    mass = np.mean(inside, axis=-1)
    event = np.any(mass < 1 - eps, axis=1)
    R = len(event)
    f = float(np.mean(event))
    half = z * np.sqrt(max(f * (1 - f), 1.0 / R) / R)
    bound = float(c_q / (eps * K**q))
    return ConcentrationReport(f, bound, min(1.0, f + half), max(0.0, f - half), K, eps, q, c_q)


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of normals with weights summing to one."""

    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    weights: np.ndarray  # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to one")
        covs = np.asarray(self.covs, dtype=float)
        if not np.allclose(covs, np.swapaxes(covs, -1, -2)):
            raise ValueError("covariances must be symmetric")
        try:
            np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc

    @property
    def d(self) -> int:
        return self.means.shape[-1]

    def density(self, y: np.ndarray, chunk: int = 4_000_000) -> np.ndarray:
        """Mixture density at points ``y`` of shape ``(P, d)``."""
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        return mixture_density(y, self.means, self.covs, self.weights, chunk)


def mixture_density(y, means, covs, weights, chunk: int = 4_000_000) -> np.ndarray:
    d = means.shape[-1]
    prec = np.linalg.inv(covs)
    norm = weights / np.sqrt((2 * np.pi) ** d * np.linalg.det(covs))
    out = np.zeros(len(y))
    per = max(1, chunk // max(1, len(y)))
    for a in range(0, len(means), per):
        u = y[None, :, :] - means[a:a + per, None, :]
        quad = np.einsum("kpi,kij,kpj->kp", u, prec[a:a + per], u)
        out += np.sum(norm[a:a + per, None] * np.exp(-0.5 * quad), axis=0)
    return out


def _substeps(ens: EmpiricalFlowEnsemble, t: float, eps: float) -> tuple[int, int]:
    if not 0 < eps <= t + 1e-12:
        raise GridAlignmentError(f"need 0 < eps <= t, got eps={eps}, t={t}")
    j = ens.index(t)
    k = eps / ens.dt
    kk = int(round(k))
    if abs(k - kk) > 1e-9 * max(1.0, k) or kk < 1:
        raise GridAlignmentError(f"eps = {eps} is not a multiple of dt = {ens.dt}")
    return j - kk, j


def predictor_covariances(ens: EmpiricalFlowEnsemble, t: float, eps: float, reps=None) -> tuple[np.ndarray, np.ndarray]:
    """Means X_{t-eps} and covariances of the frozen-coefficient one-step predictor.

    Returns ``(means, covs)`` of shapes ``(R', n, d)`` and ``(R', n, d, d)`` with
    ``cov = sum_j sigma sigma^T(t_j, X_{t-eps}, mu_{t-eps}) dt + eps sigma_bar sigma_bar^T(t-eps, ...)``.
    """
    j0, j1 = _substeps(ens, t, eps)
    cs = ens.cs
    x = ens.X[:, j0] if reps is None else ens.X[reps, j0]
    mu = WeightedSampleMeasure(x, np.full(ens.n, 1.0 / ens.n), validate=False)
    times = ens.times
    cov = np.zeros(x.shape + (ens.d,))
    for j in range(j0, j1):
        s = cs.sigma(times[j], x, mu)
        cov = cov + np.sum(s[..., :, None, :] * s[..., None, :, :], axis=-1) * ens.dt
    sb = cs.sigma_bar(times[j0], x, mu)
    cov = cov + (times[j1] - times[j0]) * np.sum(sb[..., :, None, :] * sb[..., None, :, :], axis=-1)
    return x, 0.5 * (cov + np.swapaxes(cov, -1, -2))


def one_step_gaussian(ens: EmpiricalFlowEnsemble, r: int, t: float, eps: float) -> GaussianMixture:
    """Law of the one-step predictor Y_t given the state at t - eps, one component per particle."""
    means, covs = predictor_covariances(ens, t, eps, reps=[r])
    return GaussianMixture(means[0], covs[0], np.full(ens.n, 1.0 / ens.n))


def predictor_paths(ens: EmpiricalFlowEnsemble, t: float, eps: float) -> np.ndarray:
    """Realised predictor Y_t for every particle, shape ``(R, n, d)``; needs stored noise."""
    if ens.dB is None:
        raise ValueError("the ensemble was simulated without store_noise=True")
    j0, j1 = _substeps(ens, t, eps)
    cs = ens.cs
    x = ens.X[:, j0]
    mu = WeightedSampleMeasure(x, np.full(ens.n, 1.0 / ens.n), validate=False)
    times = ens.times
    y = x.copy()
    for j in range(j0, j1):
        s = cs.sigma(times[j], x, mu)
        y = y + np.sum(s * ens.dB[:, j, :, None, :], axis=-1)
    sb = cs.sigma_bar(times[j0], x, mu)
    dz = ens.Z[:, j1] - ens.Z[:, j0]
    return y + np.sum(sb * dz[:, None, None, :], axis=-1)


# Export


def export_ensemble(ens: EmpiricalFlowEnsemble, directory, config_hash: str = "", fmt: str = "csv") -> list[Path]:
    """Write the particle paths, common-noise paths and a SimConfig sidecar.

    ``fmt`` is ``"csv"`` (columns replication, particle, step, x_1..x_d,
    config_hash) or ``"npz"``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    sidecar = directory / "sim_config.json"
    sidecar.write_text(json.dumps({**ens.config.model_dump(), "config_hash": config_hash}, indent=2, sort_keys=True))
    written.append(sidecar)
    if fmt == "npz":
        path = directory / "ensemble.npz"
        np.savez(path, X=ens.X, Z=ens.Z, failed=ens.failed, config_hash=np.array(config_hash))
        return written + [path]
    R, S, n, d = ens.X.shape
    path = directory / "ensemble.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replication", "particle", "step"] + [f"x_{k + 1}" for k in range(d)] + ["config_hash"])
        for r in range(R):
            for i in range(n):
                for j in range(S):
                    w.writerow([r, i, j] + [repr(float(v)) for v in ens.X[r, j, i]] + [config_hash])
    written.append(path)
    path = directory / "common_noise.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replication", "step"] + [f"z_{k + 1}" for k in range(ens.Z.shape[-1])] + ["config_hash"])
        for r in range(R):
            for j in range(S):
                w.writerow([r, j] + [repr(float(v)) for v in ens.Z[r, j]] + [config_hash])
    written.append(path)
    return written
