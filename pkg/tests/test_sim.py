import csv
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from mkvlab import functions as F
from mkvlab.coeffs import CoefficientSet, build_coefficients
from mkvlab.sim import (
    EllipticityWarning,
    GaussianMixture,
    GridAlignmentError,
    SimConfig,
    concentration_check,
    eval_measure,
    eval_measure_series,
    export_ensemble,
    moment_check,
    one_step_gaussian,
    predictor_covariances,
    predictor_paths,
    replication_streams,
    simulate,
    sup_moment,
)

from conftest import run

# E max_j |B_{t_j}|^2 on the 64-step grid of [0, 1]; oracles.discrete_sup_square_bm(steps=64, paths=400_000)
SUP_SQUARE_64 = (1.66240529711305, 0.002443690670260124)


def test_config_validation():
    cfg = SimConfig(n=3, steps=4, x0=0.5)
    assert cfg.x0 == [0.5] and cfg.dt == 0.25
    np.testing.assert_allclose(cfg.times, [0, 0.25, 0.5, 0.75, 1.0])
    for bad in ({"n": 0}, {"steps": 0}, {"T": -1.0}, {"replications": 0}, {"bogus": 1}):
        with pytest.raises(ValidationError):
            SimConfig(**bad)


def test_zero_coefficients_stay_at_start():
    with pytest.warns(EllipticityWarning):
        ens = simulate(SimConfig(n=4, replications=2, steps=8, x0=0.5),
                       CoefficientSet.constant(sigma=0.0))
    assert np.all(ens.X == 0.5)
    assert eval_measure(ens, 1, 1.0, F.constant(2.0)) == 2.0


def test_single_particle_bm_quadratic_mean():
    ens = run(CoefficientSet.constant(), n=1, replications=4000, steps=16, master_seed=1)
    last = ens.X[:, -1, 0, 0]
    assert abs(np.mean(last**2) - 1.0) < 3 * np.std(last**2) / np.sqrt(len(last))


def test_streams_are_deterministic_and_distinct():
    a1, b1 = replication_streams(5, 3)
    a2, b2 = replication_streams(5, 3)
    assert a1.standard_normal() == a2.standard_normal()
    assert b1.standard_normal() == b2.standard_normal()
    c, d = replication_streams(5, 4)
    assert c.standard_normal() != replication_streams(5, 3)[0].standard_normal()


def test_determinism_across_workers():
    cs = build_coefficients({"drift": {"kind": "indicator", "params": {"R": 1.0}},
                             "sigma_bar": {"kind": "constant", "params": {"value": 0.5}}})
    cfg = SimConfig(n=8, replications=120, steps=16, master_seed=11)
    e1, e4 = simulate(cfg, cs, workers=1), simulate(cfg, cs, workers=4)
    assert e1.X.tobytes() == e4.X.tobytes()
    assert e1.Z.tobytes() == e4.Z.tobytes()


def test_common_random_numbers_across_n():
    cs = CoefficientSet.constant(sigma=1.0, sigma_bar=1.0)
    small = run(cs, n=5, replications=3, steps=8, master_seed=2)
    large = run(cs, n=9, replications=3, steps=8, master_seed=2)
    np.testing.assert_array_equal(small.Z, large.Z)
    # constant coefficients: particle paths do not interact, so they coincide
    np.testing.assert_array_equal(small.X, large.X[:, :, :5])


def test_common_noise_sharing():
    cs = CoefficientSet.constant(sigma=0.0, sigma_bar=1.0)
    ens = run(cs, n=6, replications=5, steps=10, master_seed=4)
    assert np.all(ens.X == ens.X[:, :, :1])
    np.testing.assert_allclose(ens.X[:, :, 0, 0], ens.Z[:, :, 0], atol=1e-14)
    phi = F.gaussian(1)
    series = eval_measure_series(ens, phi)
    np.testing.assert_allclose(series, phi(ens.X[:, :, 0]), rtol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exchangeability_exact(seed):
    cs = build_coefficients({"drift": {"kind": "indicator", "params": {"R": 0.8}},
                             "sigma": {"kind": "statistic_tanh", "params": {"a": 0.4}},
                             "sigma_bar": {"kind": "constant", "params": {"value": 0.3}}})
    ens = run(cs, n=7, replications=2, steps=6, master_seed=seed % 1000)
    rng = np.random.default_rng(seed)
    perm = np.stack([rng.permutation(7) for _ in range(2)])
    phi = F.odd_gaussian(1)
    a = eval_measure_series(ens, phi)
    b = eval_measure_series(ens.permuted(perm), phi)
    np.testing.assert_array_equal(a, b)


def test_weak_order_under_step_halving():
    cs = CoefficientSet.constant(b=0.5)
    phi = F.gaussian(1)
    vals = []
    for steps, seed in ((32, 1), (64, 2)):
        ens = run(cs, n=20, replications=1000, steps=steps, master_seed=seed)
        v = eval_measure_series(ens, phi)[:, -1]
        vals.append((v.mean(), v.std(ddof=1) / np.sqrt(len(v))))
    (m1, s1), (m2, s2) = vals
    assert abs(m1 - m2) < 3 * np.hypot(s1, s2)
    # exact value E exp(-(0.5 + B_1)^2 / 2) = exp(-1/16) / sqrt(2)
    assert abs(m2 - np.exp(-1 / 16) / np.sqrt(2)) < 3 * s2 + 1e-3


def test_grid_alignment(bm_small):
    assert bm_small.index(0.5) == 32
    with pytest.raises(GridAlignmentError):
        bm_small.index(0.3)
    with pytest.raises(GridAlignmentError):
        one_step_gaussian(bm_small, 0, 1.0, 0.01)
    with pytest.raises(GridAlignmentError):
        one_step_gaussian(bm_small, 0, 0.25, 0.5)


def test_predictor_bm_covariance(bm_small):
    mix = one_step_gaussian(bm_small, 3, 0.5, 0.125)
    np.testing.assert_allclose(mix.covs, 0.125, rtol=1e-14)
    np.testing.assert_array_equal(mix.means, bm_small.X[3, 24])
    assert mix.weights.sum() == pytest.approx(1.0)


def test_predictor_common_noise_only():
    ens = run(CoefficientSet.constant(sigma=0.0, sigma_bar=2.0), n=3, replications=2, steps=8)
    _, covs = predictor_covariances(ens, 1.0, 0.25)
    np.testing.assert_allclose(covs, 0.25 * 4.0, rtol=1e-14)


def test_predictor_time_varying_riemann_sum():
    cs = build_coefficients({"sigma": {"kind": "time_linear", "params": {"s0": 1.0, "s1": 1.0}}})
    ens = run(cs, n=2, replications=1, steps=8)
    _, covs = predictor_covariances(ens, 0.5, 0.25)
    # substeps start at t = 0.25 and 0.375
    assert covs[0, 0, 0, 0] == pytest.approx((1.25**2 + 1.375**2) * 0.125, rel=1e-14)


def test_predictor_paths_match_simulation_for_constant_sigma(mixed_small):
    # with constant coefficients the predictor differs from X_t only by the drift
    y = predictor_paths(mixed_small, 1.0, 0.25)
    np.testing.assert_allclose(y + 0.3 * 0.25, mixed_small.X[:, -1], atol=1e-12)
    with pytest.raises(ValueError):
        predictor_paths(run(CoefficientSet.constant(), n=2, replications=1, steps=4), 1.0, 0.25)


def test_gaussian_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture(np.zeros((1, 1)), -np.ones((1, 1, 1)), np.ones(1))
    with pytest.raises(ValueError):
        GaussianMixture(np.zeros((2, 1)), np.ones((2, 1, 1)), np.ones(2))
    mix = GaussianMixture(np.zeros((1, 1)), np.ones((1, 1, 1)), np.ones(1))
    assert mix.density(np.array([0.0]))[0] == pytest.approx(1 / np.sqrt(2 * np.pi))


def test_sup_moment_matches_oracle():
    ens = run(CoefficientSet.constant(), n=50, replications=800, steps=64, master_seed=21)
    est, se = sup_moment(ens, 2.0)
    assert abs(est - SUP_SQUARE_64[0]) < 4 * np.hypot(se, SUP_SQUARE_64[1])
    with pytest.raises(ValueError):
        sup_moment(ens, 1.0)


def test_moment_uniform_in_n(bm_small):
    other = run(CoefficientSet.constant(), n=80, replications=300, steps=64, master_seed=8)
    rep = moment_check([bm_small, other], 2.0)
    assert rep.passed and rep.ns == [20, 80]


def test_concentration_below_markov(bm_small):
    est, _ = sup_moment(bm_small, 4.0)
    rep = concentration_check(bm_small, K=3.0, eps=0.1, q=4.0, c_q=est)
    assert rep.passed
    assert rep.frequency <= rep.bound


def test_nan_replications_are_excluded():
    cs = CoefficientSet.constant(b=1e308, sigma=1.0)
    with pytest.warns(RuntimeWarning):
        ens = simulate(SimConfig(n=2, replications=3, steps=2, T=4.0), cs)
    assert ens.n_failed == 3 and len(ens.good) == 0
    assert ens.diagnostics[0]["reason"] == "non-finite state"


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        simulate(SimConfig(d=2), CoefficientSet.constant())


def test_export_csv_and_npz(tmp_path, mixed_small):
    files = export_ensemble(mixed_small, tmp_path / "c", config_hash="abc")
    names = {f.name for f in files}
    assert {"sim_config.json", "ensemble.csv", "common_noise.csv"} <= names
    side = json.loads((tmp_path / "c" / "sim_config.json").read_text())
    assert side["master_seed"] == 3 and side["config_hash"] == "abc"
    with open(tmp_path / "c" / "ensemble.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["replication", "particle", "step", "x_1", "config_hash"]
    assert len(rows) == 1 + 100 * 10 * 33
    assert float(rows[2][3]) == mixed_small.X[0, 1, 0, 0]
    files = export_ensemble(mixed_small, tmp_path / "n", fmt="npz")
    data = np.load(tmp_path / "n" / "ensemble.npz")
    np.testing.assert_array_equal(data["X"], mixed_small.X)
