"""Execute an :class:`ExperimentConfig` and write its artifacts.

Every experiment returns a JSON-ready result, named verdicts and optional
CSV tables. ``report.json`` is a pure function of the config, so repeated
runs (with any worker count) produce identical bytes; the timestamp lives in
``manifest.json``.
"""

from __future__ import annotations

import csv
import json
import shutil
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .assumptions import check_ellipticity, check_holder, indicator_sandwich, random_measure, sample_tuples
from .coeffs import CoefficientSet, build_coefficients
from .config import ExperimentConfig
from .functions import TestFunction, build
from .mgverify import (
    chaos_trend,
    compute_M_all,
    default_phis,
    m_uniform_bound,
    n_scaling,
    qv_match,
    run_battery,
)
from .mollify import Mollifier, lr_on_grid, modulus_of_continuity, mollify_drift, mollify_function
from .measure import WeightedSampleMeasure
from .regularity import (
    blowup_fit,
    bessel_norm,
    coupling_rate,
    estimate_density,
    gaussian_grid,
    loglog_slope,
    lr_norm,
)
from .sim import concentration_check, eval_measure_series, export_ensemble, moment_check, simulate, sup_moment

EXIT_OK, EXIT_ERROR, EXIT_VERDICT = 0, 1, 2


@dataclass
class ExperimentResult:
    result: dict
    verdicts: dict
    tables: dict = field(default_factory=dict)  # name -> (header, rows)


def _coefficients(cfg: ExperimentConfig) -> CoefficientSet:
    return build_coefficients(cfg.coefficients.model_dump(), cfg.sim.d, cfg.sim.m, cfg.sim.T)


def _phis(cfg: ExperimentConfig) -> list[TestFunction]:
    if not cfg.test_functions:
        return default_phis(cfg.sim.d)
    return [build(tf.kind, cfg.sim.d, **tf.params) for tf in cfg.test_functions]


def _simulate(cfg: ExperimentConfig, cs, workers: int, **update):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return simulate(cfg.sim.model_copy(update=update), cs, workers=workers)


def _seeded(cfg, k):
    return (cfg.sim.master_seed + k) % 2**64


def run_simulate(cfg: ExperimentConfig, workers: int, out: Path) -> ExperimentResult:
    p = cfg.params
    cs = _coefficients(cfg)
    ns = p.get("ns", [cfg.sim.n])
    ensembles = [_simulate(cfg, cs, workers, n=n) for n in ns]
    result = {"ensembles": [{"n": e.n, "replications": e.R, "failed": e.n_failed, "diagnostics": e.diagnostics}
                            for e in ensembles]}
    verdicts = {"no_failed_replications": all(e.n_failed == 0 for e in ensembles)}
    rows = []
    for e in ensembles:
        for phi in _phis(cfg):
            lam = eval_measure_series(e, phi)[e.good, -1]
            rows.append([phi.name, e.n, float(lam.mean()), float(lam.std(ddof=1) / np.sqrt(len(lam))) if len(lam) > 1 else 0.0])
    tables = {"measure_means": (["phi", "n", "mean_at_T", "se"], rows)}
    if "moment_q" in p:
        rep = moment_check(ensembles, float(p["moment_q"]))
        result["moment"] = rep.to_dict()
        verdicts["moment_uniform_in_n"] = rep.passed
    if "concentration" in p:
        c = p["concentration"]
        conc = []
        for e in ensembles:
            c_q, _ = sup_moment(e, float(c["q"]))
            rep = concentration_check(e, float(c["K"]), float(c["eps"]), float(c["q"]), c_q)
            conc.append({"n": e.n, **rep.to_dict()})
        result["concentration"] = conc
        verdicts["concentration_bound"] = all(r["pass"] for r in conc)
    if p.get("export", True):
        export_ensemble(ensembles[0], out, cfg.config_hash, p.get("format", "csv"))
    return ExperimentResult(result, verdicts, tables)


def run_verify(cfg: ExperimentConfig, workers: int, out: Path) -> ExperimentResult:
    p = cfg.params
    cs = _coefficients(cfg)
    phis = _phis(cfg)
    z, threshold = float(p.get("z", 3.0)), float(p.get("threshold", 0.95))
    seeds = int(p.get("seeds", 1))
    reports, bounds = [], []
    for k in range(seeds):
        ens = _simulate(cfg, cs, workers, master_seed=_seeded(cfg, k))
        reports.append(run_battery(ens, phis, z=z, threshold=threshold, config_hash=cfg.config_hash))
        worst = 0.0
        for phi in phis:
            M = compute_M_all(ens, phi)[ens.good]
            worst = max(worst, float(np.max(np.abs(M)) / m_uniform_bound(ens, phi)))
        bounds.append(worst)
    result = reports[0].to_dict()
    seed_pass = [r.passed for r in reports]
    result["seeds"] = [{"master_seed": _seeded(cfg, k), "battery_pass_rate": r.battery_pass_rate, "pass": r.passed,
                        "max_M_over_bound": b} for k, (r, b) in enumerate(zip(reports, bounds))]
    result["seed_pass_fraction"] = float(np.mean(seed_pass))
    need = float(p.get("seed_fraction", 0.9))
    verdicts = {"battery": result["seed_pass_fraction"] >= need if seeds > 1 else seed_pass[0],
                "martingale_bound": max(bounds) <= 1.0}
    rows = [[k, t.phi_id, t.s, t.t, t.g_id, t.stat, t.se, t.z, t.passed] for k, r in enumerate(reports) for t in r.tests]
    tables = {"residual_tests": (["seed_index", "phi_id", "s", "t", "g_id", "stat", "se", "z", "pass"], rows)}
    return ExperimentResult(result, verdicts, tables)


def run_qv(cfg: ExperimentConfig, workers: int, out: Path) -> ExperimentResult:
    tol = float(cfg.params.get("tolerance", 0.1))
    ens = _simulate(cfg, _coefficients(cfg), workers)
    reps = {phi.name: qv_match(ens, phi) for phi in _phis(cfg)}
    result = {"qv": {k: v.to_dict() for k, v in reps.items()}, "tolerance": tol}
    verdicts = {f"ratio_within_band[{k}]": bool(v.gap <= tol) for k, v in reps.items()}
    rows = [[k, v.realized_mean, v.predicted_mean, v.ratio, v.realized_se] for k, v in reps.items()]
    return ExperimentResult(result, verdicts, {"qv": (["phi", "realized", "predicted", "ratio", "realized_se"], rows)})


def run_nscale(cfg: ExperimentConfig, workers: int, out: Path) -> ExperimentResult:
    p = cfg.params
    cs = _coefficients(cfg)
    ens = [_simulate(cfg, cs, workers, n=n) for n in p.get("ns", [50, 100, 200, 400])]
    lo, hi = p.get("slope_band", [-1.15, -0.85])
    result, verdicts, rows = {}, {}, []
    for phi in _phis(cfg):
        fit = n_scaling(ens, phi)
        result[phi.name] = fit.to_dict()
        verdicts[f"slope_in_band[{phi.name}]"] = bool(lo <= fit.slope <= hi)
        rows += [[phi.name, n, v] for n, v in zip(fit.ns, fit.values)]
    result["slope_band"] = [lo, hi]
    return ExperimentResult(result, verdicts, {"nscale": (["phi", "n", "mean_realized_qv"], rows)})


def run_chaos(cfg: ExperimentConfig, workers: int, out: Path) -> ExperimentResult:
    p = cfg.params
    cs = _coefficients(cfg)
    ns = p.get("ns", [25, 50, 100, 200])
    times = p.get("times", [cfg.sim.T])
    groups = [[_simulate(cfg, cs, workers, n=n, master_seed=_seeded(cfg, k)) for n in ns]
              for k in range(int(p.get("seeds", 1)))]
    rep = chaos_trend(groups, _phis(cfg), times)
    result = rep.to_dict()
    if p.get("expect_zero"):
        verdicts = {"distances_vanish": bool(max(rep.distances) <= float(p.get("zero_tol", 1e-12)))}
    else:
        verdicts = {"decreasing": rep.decreasing}
    rows = [[a, b, d] for a, b, d in zip(rep.ns, rep.ns[1:], rep.distances)]
    return ExperimentResult(result, verdicts, {"chaos": (["n_from", "n_to", "median_energy_distance"], rows)})


def run_density(cfg: ExperimentConfig, workers: int, out: Path) -> ExperimentResult:
    p = cfg.params
    result, verdicts, tables = {}, {}, {}
    if "gaussian_scaling" in p:
        g = p["gaussian_scaling"]
        eps, r, s = g["eps"], float(g["r"]), float(g["s"])
        norms = [bessel_norm(gaussian_grid(e, cfg.sim.d), r, s) for e in eps]
        slope, se = loglog_slope(eps, norms)
        target = -(s + cfg.sim.d * (1 - 1 / r)) / 2
        result["gaussian_scaling"] = {"eps": eps, "norms": norms, "slope": slope, "slope_se": se, "target": target}
        verdicts["gaussian_scaling_slope"] = bool(abs(slope - target) <= float(g.get("tolerance", 0.1)) * abs(target))
        tables["gaussian_scaling"] = (["eps", "bessel_norm"], [[e, v] for e, v in zip(eps, norms)])
    if "coupling" in p or "t" in p:
        ens = _simulate(cfg, _coefficients(cfg), workers)
    if "coupling" in p:
        c = p["coupling"]
        fit = coupling_rate(ens, float(c["t"]), c["eps"], float(c.get("q", 2.0)))
        result["coupling"] = fit.to_dict()
        verdicts["coupling_exponent"] = bool(fit.exponent >= float(c.get("min_exponent", 0.5)))
        tables["coupling"] = (["eps", "lq_gap", "se"], [list(x) for x in zip(fit.abscissae, fit.ordinates, fit.ses)])
    if "t" in p:
        dens = estimate_density(ens, float(p["t"]), float(p.get("eps", p["t"])))
        r, s = float(p.get("r", 2.0)), float(p.get("s", 0.0))
        result["density"] = {"t": p["t"], "mass": dens.mass, "lr_norm": lr_norm(dens, r),
                             "bessel_norm": bessel_norm(dens, r, s), "r": r, "s": s}
        verdicts["unit_mass"] = bool(abs(dens.mass - 1) <= 1e-3)
        if dens.d == 1:
            tables["density"] = (["y", "density"], [[y, v] for y, v in zip(dens.axes()[0], dens.values)])
    return ExperimentResult(result, verdicts, tables)


def run_blowup(cfg: ExperimentConfig, workers: int, out: Path) -> ExperimentResult:
    p = cfg.params
    cs = _coefficients(cfg)
    ens = [_simulate(cfg, cs, workers, n=n) for n in p.get("ns", [cfg.sim.n])]
    rep = blowup_fit(ens, p["t"], float(p.get("r", 2.0)), float(p.get("eps_max", 1 / 16)),
                     int(p.get("bootstrap", 200)), cfg.sim.master_seed)
    result = rep.to_dict()
    verdicts = {"gamma_below_one": all(f.exponent < 1 for f in rep.fits.values()), "ci_overlap_across_n": rep.overlap}
    if "gamma_band" in p:
        lo, hi = p["gamma_band"]
        verdicts["gamma_in_band"] = all(lo <= f.exponent <= hi for f in rep.fits.values())
    rows = [[n, t, v, s] for n, f in rep.fits.items() for t, v, s in zip(f.abscissae, f.ordinates, f.ses)]
    return ExperimentResult(result, verdicts, {"blowup": (["n", "t", "lr_norm", "bootstrap_se"], rows)})


def run_mollify(cfg: ExperimentConfig, workers: int, out: Path) -> ExperimentResult:
    p = cfg.params
    deltas = p.get("deltas", [0.4, 0.2, 0.1, 0.05])
    nodes = int(p.get("nodes", 4001))
    x = np.linspace(-2, 2, int(p.get("grid_points", 801)))
    mol = Mollifier(1)
    if p.get("drift", "step") == "step":
        def base(pts):
            return (pts[:, 0] <= 0).astype(float)

        sup_b = 1.0
        b_grid = base(x[:, None])
        smooth = [mollify_function(base, x[:, None], dl, mol, nodes) for dl in deltas]
    else:
        cs = _coefficients(cfg)
        mu = WeightedSampleMeasure.empirical(stats.norm.ppf((np.arange(201) + 0.5) / 201))
        b_grid = cs.drift(0.0, x[:, None], mu)[:, 0]
        sup_b = cs.b_sup
        smooth = [mollify_drift(cs.drift, 0.0, mu, dl, x[:, None], mol, nodes)[:, 0] for dl in deltas]
    rows, sup_ok, lip_ok, errs = [], True, True, []
    for dl, v in zip(deltas, smooth):
        err = lr_on_grid(v - b_grid, x, 2)
        lip = modulus_of_continuity(v, x)
        errs.append(err)
        sup_ok &= bool(np.max(np.abs(v)) <= sup_b + 1e-10)
        lip_ok &= bool(lip <= sup_b * mol.derivative_l1() / dl * 1.01)
        rows.append([dl, float(np.max(np.abs(v))), err, lip])
    result = {"deltas": deltas, "l2_errors": errs, "sup_bound": sup_b}
    verdicts = {"sup_norm_bound": sup_ok, "lipschitz_bound": lip_ok,
                "l2_error_decreasing": bool(np.all(np.diff(errs) < 0))}
    return ExperimentResult(result, verdicts, {"mollify": (["delta", "sup_abs", "l2_error", "modulus"], rows)})


def run_assumptions(cfg: ExperimentConfig, workers: int, out: Path) -> ExperimentResult:
    p = cfg.params
    cs = _coefficients(cfg)
    rng = np.random.default_rng(cfg.sim.master_seed)
    result, verdicts, tables = {}, {}, {}
    checks = p.get("checks", ["ellipticity", "holder"])
    if "ellipticity" in checks:
        rep = check_ellipticity(cs, sample_tuples(rng, cs.d, int(p.get("samples", 200)), cfg.sim.T),
                                p.get("kappa"))
        result["ellipticity"] = {"min_quotient": rep.min_quotient, "kappa": rep.kappa, "samples": rep.samples}
        verdicts["ellipticity"] = rep.passed
    if "holder" in checks:
        pairs = []
        for _ in range(int(p.get("samples", 200))):
            mu = random_measure(rng, cs.d)
            mu2 = mu if cs.d > 1 else random_measure(rng, cs.d)
            pairs.append(((rng.uniform(0, cfg.sim.T), rng.normal(size=cs.d), mu), (rng.normal(size=cs.d), mu2)))
        rep = check_holder(cs, pairs, float(p.get("holder_C", 1.0)), p.get("holder_beta"))
        result["holder"] = {"max_ratio": rep.max_ratio, "C": rep.C, "beta": rep.beta, "samples": rep.samples}
        verdicts["holder"] = rep.passed
    if "sandwich" in checks:
        R = float(cfg.coefficients.drift.params.get("R", 1.0))
        rep = indicator_sandwich(R, tuple(p.get("ks", (100, 1000, 10000))), int(p.get("seeds", 20)),
                                 cfg.sim.master_seed, tuple(p.get("K", (-2.0, 2.0))))
        d = rep.to_dict()
        d.pop("per_seed")
        result["sandwich"] = d
        verdicts["sandwich_decreasing"] = rep.decreasing
        verdicts["sandwich_final_gap"] = bool(rep.final_gap <= float(p.get("max_final_gap", 0.05)))
        tables["sandwich"] = (["k", "median_sup_gap"], [[k, g] for k, g in zip(rep.ks, rep.gaps)])
    return ExperimentResult(result, verdicts, tables)


EXPERIMENTS = {
    "simulate": run_simulate,
    "verify": run_verify,
    "qv": run_qv,
    "nscale": run_nscale,
    "chaos": run_chaos,
    "density": run_density,
    "blowup": run_blowup,
    "mollify": run_mollify,
    "assumptions": run_assumptions,
}


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_table(path: Path, header, rows, config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(header) + ["config_hash"])
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row] + [config_hash])


def execute(cfg: ExperimentConfig, out_dir, workers: int = 1) -> int:
    """Run ``cfg`` and write its artifacts into ``out_dir``.

    Returns 0 when every verdict passes and 2 otherwise. Exceptions propagate
    after the partially written directory is removed.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".mkvlab-", dir=out_dir.parent))
    try:
        res = EXPERIMENTS[cfg.kind](cfg, workers, tmp)
        verdicts = {k: bool(v) for k, v in res.verdicts.items()}
        passed = all(verdicts.values())
        report = {"kind": cfg.kind, "name": cfg.name, "config_hash": cfg.config_hash,
                  "master_seed": cfg.sim.master_seed, "verdicts": verdicts, "pass": passed, "result": res.result}
        (tmp / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_jsonable) + "\n")
        for name, (header, rows) in res.tables.items():
            _write_table(tmp / f"{name}.csv", header, rows, cfg.config_hash)
        (tmp / "config.json").write_text(json.dumps(cfg.hashed_content(), indent=2, sort_keys=True) + "\n")
        files = sorted(p.name for p in tmp.iterdir()) + ["manifest.json"]
        manifest = {"config_hash": cfg.config_hash, "master_seed": cfg.sim.master_seed, "kind": cfg.kind,
                    "name": cfg.name, "version": __version__, "workers": workers,
                    "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "files": sorted(files), "pass": passed}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in tmp.iterdir():
            shutil.move(str(f), out_dir / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return EXIT_OK if passed else EXIT_VERDICT
