"""The twelve acceptance criteria at their stated tolerances.

Each test records a one-line verdict that is printed in the pytest terminal
summary, then asserts it.
"""

import json
import time
import warnings

import numpy as np
import pytest

from mkvlab import functions as F
from mkvlab import config as C
from mkvlab.assumptions import indicator_sandwich
from mkvlab.coeffs import build_coefficients, drift_indicator
from mkvlab.hermite import (
    SUP_BOUND_1D,
    CoeffVector,
    HermiteBasis,
    hermite_coeffs_fn,
    hermite_coeffs_measure,
    hermite_table,
    hp_norm,
    pairing,
)
from mkvlab.measure import WeightedSampleMeasure
from mkvlab.mgverify import default_phis, n_scaling, qv_match
from mkvlab.mollify import Mollifier, lr_on_grid, modulus_of_continuity, mollify_drift, mollify_function
from mkvlab.ops import OperatorContext, char_A, drift_bound
from mkvlab.regularity import bessel_norm, blowup_fit, coupling_rate, gaussian_grid
from mkvlab.runner import execute
from mkvlab.sim import eval_measure_series, simulate

import oracles
from acceptance_log import record
from test_ops import _random_coefficients, _random_measure, _random_phi

pytestmark = pytest.mark.acceptance


def _sim(cfg, **update):
    cs = build_coefficients(cfg.coefficients.model_dump(), cfg.sim.d, cfg.sim.m, cfg.sim.T)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return simulate(cfg.sim.model_copy(update=update), cs)


@pytest.fixture(scope="module")
def bm_null_20_seeds(tmp_path_factory):
    cfg = C.preset("bm-null")
    cfg = cfg.model_copy(update={"params": {**cfg.params, "seeds": 20, "seed_fraction": 0.9}})
    out = tmp_path_factory.mktemp("bm-null")
    start = time.time()
    code = execute(cfg, out, workers=4)
    report = json.loads((out / "report.json").read_text())
    return code, report, time.time() - start


def test_criterion_01_martingale_battery(bm_null_20_seeds):
    code, report, secs = bm_null_20_seeds
    seeds = report["result"]["seeds"]
    good = sum(s["battery_pass_rate"] >= 0.95 for s in seeds)
    n_tests = len(report["result"]["tests"])
    ok = len(seeds) == 20 and n_tests == 24 and good >= 18 and secs <= 600
    rates = sorted(s["battery_pass_rate"] for s in seeds)
    record(1, "martingale residual battery", ok,
           f"{good}/20 seeds with >= 95% of {n_tests} tests passing (lowest rate {rates[0]:.3f})", secs)
    assert ok


def test_criterion_02_qv_structure():
    start = time.time()
    ratios = {}
    for name in ("sigma-bar-only", "sigma-only"):
        cfg = C.preset(name)
        ens = _sim(cfg)
        ratios[name] = qv_match(ens, F.gaussian(1)).ratio
    secs = time.time() - start
    ok = all(0.9 <= r <= 1.1 for r in ratios.values()) and secs <= 300
    record(2, "quadratic variation structure", ok,
           ", ".join(f"{k} ratio {v:.4f}" for k, v in ratios.items()), secs)
    assert ok


def test_criterion_03_one_over_n_decay():
    start = time.time()
    cfg = C.preset("nscale-bm")
    ens = [_sim(cfg, n=n) for n in (50, 100, 200, 400)]
    fit = n_scaling(ens, F.gaussian(1))
    secs = time.time() - start
    ok = -1.15 <= fit.slope <= -0.85 and secs <= 900
    record(3, "1/n decay of the quadratic variation", ok, f"slope {fit.slope:.4f} +- {fit.slope_se:.4f}", secs)
    assert ok


def test_criterion_04_uniform_bounds(bm_null_20_seeds):
    start = time.time()
    rng = np.random.default_rng(4)
    violations, worst = 0, 0.0
    for _ in range(1000):
        ctx = OperatorContext(_random_coefficients(rng), float(rng.uniform(0, 1)))
        phi, lam = _random_phi(rng), _random_measure(rng)
        a, bound = abs(float(char_A(ctx, lam, phi))), drift_bound(ctx, phi)
        violations += a > bound
        worst = max(worst, a / bound if bound else 0.0)
    _, report, _ = bm_null_20_seeds
    path_ratio = max(s["max_M_over_bound"] for s in report["result"]["seeds"])
    # the same bound on a drifted, common-noise system
    from mkvlab.mgverify import compute_M_all, m_uniform_bound

    ens = _sim(C.preset("indicator-drift"), replications=200)
    for phi in default_phis():
        path_ratio = max(path_ratio, float(np.abs(compute_M_all(ens, phi)).max() / m_uniform_bound(ens, phi)))
    secs = time.time() - start
    ok = violations == 0 and path_ratio <= 1.0
    record(4, "uniform bounds", ok,
           f"{violations} violations in 1000 tuples (max |A|/bound {worst:.3f}); max |M|/bound on paths {path_ratio:.3f}",
           secs)
    assert ok


def test_criterion_05_gaussian_bessel_scaling():
    start = time.time()
    eps = [2.0**-k for k in range(2, 8)]
    r, s, d = 1.5, 0.5, 1
    norms = [bessel_norm(gaussian_grid(e), r, s) for e in eps]
    slope = np.polyfit(np.log(eps), np.log(norms), 1)[0]
    target = -(s + d / (r / (r - 1))) / 2
    secs = time.time() - start
    ok = abs(slope - target) <= 0.10 * abs(target) and secs <= 60
    record(5, "Gaussian Bessel scaling", ok, f"slope {slope:.4f} vs {target:.4f}", secs)
    assert ok


def test_criterion_06_coupling_rate():
    start = time.time()
    exps = {}
    for name in ("coupling-constant", "coupling-holder"):
        cfg = C.preset(name)
        ens = _sim(cfg)
        c = cfg.params["coupling"]
        exps[name] = coupling_rate(ens, c["t"], c["eps"], c["q"]).exponent
    secs = time.time() - start
    ok = exps["coupling-constant"] >= 0.9 and exps["coupling-holder"] >= 0.55 and secs <= 600
    record(6, "coupling rate", ok, ", ".join(f"{k} exponent {v:.4f}" for k, v in exps.items()), secs)
    assert ok


def test_criterion_07_blowup_exponent():
    start = time.time()
    fits = {}
    for name in ("blowup-bm", "blowup-drift"):
        cfg = C.preset(name)
        p = cfg.params
        ens = [_sim(cfg, n=n) for n in p["ns"]]
        fits[name] = blowup_fit(ens, p["t"], p["r"], p["eps_max"])
    secs = time.time() - start
    bm = [f.exponent for f in fits["blowup-bm"].fits.values()]
    dr = [f.exponent for f in fits["blowup-drift"].fits.values()]
    ok = (all(0.2 <= g <= 0.3 for g in bm) and all(g < 1 for g in dr)
          and fits["blowup-bm"].overlap and fits["blowup-drift"].overlap and secs <= 900)
    record(7, "density blow-up exponent", ok,
           f"BM gamma {', '.join(f'{g:.3f}' for g in bm)}; drift gamma {', '.join(f'{g:.3f}' for g in dr)}; "
           f"CIs overlap {fits['blowup-bm'].overlap}/{fits['blowup-drift'].overlap}", secs)
    assert ok


def test_criterion_08_mollifier_suite():
    start = time.time()
    checks = {}
    h = Mollifier(1)
    x = np.linspace(-1, 1, 400_001)
    checks["unit mass"] = abs(np.trapezoid(h(x), x) - 1) <= 1e-8
    checks["positivity"] = bool(np.all(h(x) >= 0))
    step = lambda p: (p[:, 0] <= 0).astype(float)
    checks["constant reproduced"] = bool(np.allclose(mollify_function(lambda p: np.full(len(p), 2.5),
                                                                      np.linspace(-2, 2, 41), 0.1), 2.5, atol=1e-8))
    away = np.array([-0.3, -0.11, 0.11, 0.3])
    checks["step away from the jump"] = bool(np.array_equal(np.round(mollify_function(step, away, 0.1), 12), [1, 1, 0, 0]))
    probe = np.array([-0.08, -0.02, 0.0, 0.01, 0.05, 0.09])
    fine = mollify_function(step, probe, 0.1, nodes=2**19 + 1)
    checks["oracle 1e-5"] = bool(np.max(np.abs(fine - oracles.mollified_step(probe, 0.1))) <= 1e-5)
    grid = np.linspace(-2, 2, 8001)
    errs = [lr_on_grid(mollify_function(step, grid, d) - step(grid[:, None]), grid, 2.0) for d in (0.4, 0.2, 0.1, 0.05)]
    checks["L2 decreasing"] = all(b < a for a, b in zip(errs, errs[1:]))
    rng = np.random.default_rng(8)
    sup_ok, lr_ok, lip_ok = True, True, True
    K = np.linspace(-1, 1, 2001)
    for _ in range(5):
        mu = WeightedSampleMeasure.empirical(rng.normal(size=(30, 1)))
        b = lambda t, p, m: drift_indicator(p, m, 0.6)[..., None]
        for delta in (0.05, 0.2):
            v = mollify_drift(b, 0.0, mu, delta, K, nodes=401)[:, 0]
            sup_ok &= bool(np.abs(v).max() <= 1.0 + 1e-10)
            lip_ok &= bool(np.isfinite(modulus_of_continuity(v, K)))
            wide = np.linspace(-1 - delta, 1 + delta, 2401)
            raw = b(0.0, wide[:, None], mu)[:, 0]
            for r in (1.0, 2.0):
                lr_ok &= lr_on_grid(v, K, r) <= lr_on_grid(raw, wide, r) + 1e-3
    checks["sup bound"], checks["restricted L^r bound"], checks["finite modulus"] = sup_ok, lr_ok, lip_ok
    secs = time.time() - start
    ok = all(checks.values()) and secs <= 60
    failed = [k for k, v in checks.items() if not v]
    record(8, "mollifier suite", ok,
           f"{sum(checks.values())}/{len(checks)} checks" + (f", failed: {failed}" if failed else "")
           + f"; L2 errors {', '.join(f'{e:.4f}' for e in errs)}", secs)
    assert ok


def test_criterion_09_sandwich_continuity():
    start = time.time()
    rep = indicator_sandwich(1.0, (100, 1000, 10_000), seeds=20, K=(-2.0, 2.0))
    secs = time.time() - start
    ok = rep.final_gap <= 0.05 and rep.decreasing and secs <= 120
    record(9, "sandwich continuity", ok, f"median gaps {', '.join(f'{g:.4f}' for g in rep.gaps)}", secs)
    assert ok


def test_criterion_10_hermite_suite():
    start = time.time()
    xq, wq = np.polynomial.legendre.leggauss(400)
    table = hermite_table(12, 12 * xq)
    gram = (table * 12 * wq) @ table.T
    ortho = float(np.abs(gram - np.eye(13)).max())
    xs = np.linspace(-40, 40, 8001)
    sup1 = float(np.abs(hermite_table(200, xs)).max())
    sup2 = float(np.abs(HermiteBasis(2, 15).evaluate(np.random.default_rng(0).normal(scale=3, size=(2000, 2)))).max())
    rng = np.random.default_rng(1)
    mono = all(
        hp_norm(v, p) <= hp_norm(v, p + 1) * (1 + 1e-12)
        for v in (CoeffVector(1, 20, rng.normal(size=21)) for _ in range(50))
        for p in (-2, -1, 0, 1)
    )
    basis = HermiteBasis(1, 60)
    val = pairing(hermite_coeffs_measure(WeightedSampleMeasure.dirac(0.0), basis),
                  hermite_coeffs_fn(F.gaussian(1), basis))
    secs = time.time() - start
    ok = (ortho <= 1e-8 and sup1 <= SUP_BOUND_1D and sup2 <= (2 * np.pi) ** 0.5 and mono
          and abs(val - 1.0) <= 1e-4 and secs <= 60)
    record(10, "Hermite suite", ok,
           f"orthonormality error {ortho:.1e}, sup {sup1:.4f} (1d) {sup2:.4f} (2d), monotone {mono}, "
           f"<delta_0, phi> = {val:.8f}", secs)
    assert ok


def test_criterion_11_moments_concentration(tmp_path):
    start = time.time()
    code = execute(C.preset("moments-bm"), tmp_path / "m", workers=1)
    report = json.loads((tmp_path / "m" / "report.json").read_text())
    secs = time.time() - start
    mom = report["result"]["moment"]
    conc = report["result"]["concentration"]
    ok = (code == 0 and mom["max_z"] <= 3 and all(c["frequency"] <= c["bound"] for c in conc)
          and (mom["ns"] == [50, 200]) and secs <= 300)
    record(11, "moments and concentration", ok,
           f"E sup|X|^2 = {mom['estimates'][0]:.4f} (n=50), {mom['estimates'][1]:.4f} (n=200), z {mom['max_z']:.2f}; "
           f"frequency {max(c['frequency'] for c in conc):.4f} <= bound {conc[0]['bound']:.4f}", secs)
    assert ok


def test_criterion_12_determinism_exchangeability(tmp_path):
    start = time.time()
    cfg = C.preset("indicator-drift")
    cfg = cfg.model_copy(update={"sim": cfg.sim.model_copy(update={"replications": 200, "n": 50})})
    execute(cfg, tmp_path / "w1", workers=1)
    execute(cfg, tmp_path / "w4", workers=4)
    names = sorted(p.name for p in (tmp_path / "w1").iterdir() if p.name != "manifest.json")
    same = all((tmp_path / "w1" / n).read_bytes() == (tmp_path / "w4" / n).read_bytes() for n in names)
    e1 = _sim(cfg)
    cs = e1.cs
    e4 = simulate(cfg.sim, cs, workers=4)
    same &= e1.X.tobytes() == e4.X.tobytes()
    rng = np.random.default_rng(12)
    perms = np.stack([rng.permutation(e1.n) for _ in range(e1.R)])
    exch = all(np.array_equal(eval_measure_series(e1, phi), eval_measure_series(e1.permuted(perms), phi))
               for phi in default_phis())
    secs = time.time() - start
    ok = same and exch
    record(12, "determinism and exchangeability", ok,
           f"workers 1 vs 4 byte-identical {same} over {len(names)} files + raw ensemble; permutation-exact {exch}",
           secs)
    assert ok
