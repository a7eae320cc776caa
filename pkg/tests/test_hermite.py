import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkvlab import functions as F
from mkvlab.hermite import (
    SUP_BOUND_1D,
    CoeffVector,
    DomainWarning,
    HermiteBasis,
    HermiteRangeError,
    ProbeGrid,
    bracket,
    hermite_coeffs_fn,
    hermite_coeffs_measure,
    hermite_eval,
    hermite_table,
    hp_norm,
    pairing,
    seminorm_m_star,
)
from mkvlab.measure import WeightedSampleMeasure

import oracles

# frozen from oracles.normal_density_coefficient (scipy quad on eval_hermitenorm)
NORMAL_COEFFS = {
    0: 0.5157145724794111,
    2: -0.12155509045230431,
    4: 0.035089932097003625,
    6: -0.010677526306029689,
    8: 0.003329303764619078,
}


def test_bracket():
    assert bracket([0]) == 1.0
    assert bracket([3, 4]) == pytest.approx(np.sqrt(26))


def test_lowest_function_at_zero():
    assert hermite_eval(0, 0.0) == pytest.approx(0.631618777746, abs=1e-11)
    assert hermite_eval(0, 0.0) == pytest.approx((2 * np.pi) ** -0.25, rel=1e-15)
    assert hermite_eval(1, 0.0) == 0.0


def test_recurrence_matches_polynomial_formula():
    x = np.linspace(-6, 6, 101)
    table = hermite_table(25, x)
    for k in range(26):
        np.testing.assert_allclose(table[k], oracles.hermite_function(k, x), atol=1e-12)


def test_tensor_product_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        j, l = rng.integers(0, 30, size=2)
        x = rng.normal(scale=3, size=2)
        assert hermite_eval((j, l), x) == hermite_eval(j, x[0]) * hermite_eval(l, x[1])


def test_range_guard():
    with pytest.raises(HermiteRangeError):
        hermite_table(601, 0.0)
    with pytest.raises(HermiteRangeError):
        HermiteBasis(1, 1000)


def test_uniform_bound_high_degree():
    x = np.linspace(-50, 50, 20001)
    table = hermite_table(600, x)
    assert np.all(np.isfinite(table))
    assert np.abs(table).max() <= SUP_BOUND_1D * (1 + 1e-10)
    # the largest value is attained by h_0 at 0
    assert np.abs(table).max() == pytest.approx((2 * np.pi) ** -0.25, rel=1e-12)


def test_uniform_bound_2d():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=4, size=(500, 2))
    vals = HermiteBasis(2, 20).evaluate(x)
    assert np.abs(vals).max() <= (2 * np.pi) ** 0.5 * (1 + 1e-10)


def test_orthonormality_up_to_degree_12():
    x, w = np.polynomial.legendre.leggauss(400)
    x, w = 12 * x, 12 * w
    table = hermite_table(12, x)
    gram = (table * w) @ table.T
    np.testing.assert_allclose(gram, np.eye(13), atol=1e-8)


def test_coefficients_of_basis_function_are_indicator():
    basis = HermiteBasis(1, 20)
    c = hermite_coeffs_fn(lambda p: hermite_eval(7, p[:, 0]), basis)
    expected = np.zeros(21)
    expected[7] = 1
    np.testing.assert_allclose(c.coeffs, expected, atol=1e-10)


def test_zero_function_gives_zero_vector():
    c = hermite_coeffs_fn(lambda p: np.zeros(len(p)), HermiteBasis(1, 10))
    assert np.all(c.coeffs == 0)


def test_normal_density_coefficients_match_oracle():
    basis = HermiteBasis(1, 30)
    c = hermite_coeffs_fn(lambda p: np.exp(-p[:, 0] ** 2 / 2) / np.sqrt(2 * np.pi), basis)
    for k, v in NORMAL_COEFFS.items():
        assert c[k] == pytest.approx(v, abs=1e-8)
    for k in range(1, 30, 2):
        assert abs(c[k]) < 1e-12
    for k in (10, 14, 20):
        assert c[k] == pytest.approx(oracles.normal_density_coefficient(k), abs=1e-8)


def test_frozen_normal_coefficients_reproduce():
    for k, v in NORMAL_COEFFS.items():
        assert oracles.normal_density_coefficient(k) == pytest.approx(v, abs=1e-12)


def test_domain_warning():
    with pytest.warns(DomainWarning):
        hermite_coeffs_fn(lambda p: np.ones(len(p)), HermiteBasis(1, 4), half_width=3.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        hermite_coeffs_fn(lambda p: np.exp(-p[:, 0] ** 2), HermiteBasis(1, 4))


def test_dirac_coefficients():
    basis = HermiteBasis(1, 40)
    c = hermite_coeffs_measure(WeightedSampleMeasure.dirac(0.0), basis)
    assert c[0] == pytest.approx((2 * np.pi) ** -0.25, rel=1e-15)
    c = hermite_coeffs_measure(WeightedSampleMeasure.dirac(1.3), basis)
    np.testing.assert_allclose(c.coeffs, hermite_table(40, 1.3), rtol=0, atol=0)


def test_symmetric_pair_has_vanishing_odd_coefficients():
    c = hermite_coeffs_measure(WeightedSampleMeasure.empirical([[-0.7], [0.7]]), HermiteBasis(1, 25))
    assert np.all(np.abs(c.coeffs[1::2]) < 1e-15)


def test_empirical_coefficients_are_mean_of_points():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(10, 1))
    basis = HermiteBasis(1, 15)
    c = hermite_coeffs_measure(WeightedSampleMeasure.empirical(pts), basis)
    per = np.mean([hermite_coeffs_measure(WeightedSampleMeasure.dirac(p), basis).coeffs for p in pts], axis=0)
    np.testing.assert_allclose(c.coeffs, per, atol=1e-15)


def test_mixture_linearity():
    rng = np.random.default_rng(3)
    basis = HermiteBasis(2, 6)
    mu = WeightedSampleMeasure.empirical(rng.normal(size=(5, 2)))
    nu = WeightedSampleMeasure.empirical(rng.normal(size=(7, 2)))
    mix = WeightedSampleMeasure.mixture([mu, nu], [0.3, 0.7])
    lhs = hermite_coeffs_measure(mix, basis)
    rhs = 0.3 * hermite_coeffs_measure(mu, basis) + 0.7 * hermite_coeffs_measure(nu, basis)
    np.testing.assert_allclose(lhs.coeffs, rhs.coeffs, atol=1e-15)


def test_hp_norm_examples():
    v = CoeffVector(1, 10, np.zeros(11))
    assert hp_norm(v, 3.0) == 0
    e = np.zeros(11)
    e[4] = 1
    assert hp_norm(CoeffVector(1, 10, e), 2.0) == pytest.approx(np.sqrt(17) ** 2)
    e2 = np.zeros(36)
    e2[2 * 6 + 3] = 1  # k = (2, 3)
    assert hp_norm(CoeffVector(2, 5, e2), 1.0) == pytest.approx(np.sqrt(14) ** 0.5)


def _dirac_partial_sums(p, kmax):
    h0 = hermite_table(kmax, 0.0)
    return np.cumsum((bracket(np.arange(kmax + 1)[:, None]) ** (-p) * h0) ** 2)


def test_dirac_negative_norm_converges_for_p1_not_p0():
    blocks = [2**j for j in range(3, 10)]
    for p, converges in ((1, True), (0, False)):
        S = _dirac_partial_sums(p, 2**9)
        inc = np.diff([S[b] for b in blocks])
        ratios = inc[1:] / inc[:-1]
        if converges:
            assert np.all(ratios < 1)
        else:
            assert np.all(ratios > 1)


def test_pairing_recovers_point_value():
    basis = HermiteBasis(1, 60)
    phi = F.gaussian(1)
    lam = hermite_coeffs_measure(WeightedSampleMeasure.dirac(0.0), basis)
    coeffs = hermite_coeffs_fn(phi, basis)
    assert pairing(lam, coeffs) == pytest.approx(1.0, abs=1e-4)
    assert pairing(lam, 0 * coeffs) == 0
    assert pairing(coeffs, coeffs) == pytest.approx(hp_norm(coeffs, 0) ** 2, rel=1e-14)


def test_pairing_truncation_mismatch():
    with pytest.raises(ValueError):
        pairing(CoeffVector(1, 3, np.zeros(4)), CoeffVector(1, 4, np.zeros(5)))


def test_json_round_trip():
    rng = np.random.default_rng(4)
    v = CoeffVector(2, 3, rng.normal(size=16))
    payload = json.loads(v.to_json())
    assert payload["d"] == 2 and payload["kmax"] == 3
    assert payload["coeffs"][5][0] == [1, 1]
    w = CoeffVector.from_json(v.to_json())
    np.testing.assert_array_equal(v.coeffs, w.coeffs)
    assert w[(1, 2)] == v.coeffs[6]


vectors = st.integers(1, 2).flatmap(
    lambda d: st.tuples(
        st.just(d),
        st.lists(st.floats(-10, 10), min_size=(5 if d == 1 else 9) * 2, max_size=(5 if d == 1 else 9) * 2),
    )
)


@settings(max_examples=60, deadline=None)
@given(vectors, st.floats(-4, 4), st.floats(0, 4))
def test_hp_monotone_in_p(data, p, dp):
    d, vals = data
    kmax = 4 if d == 1 else 2
    n = (kmax + 1) ** d
    v = CoeffVector(d, kmax, np.array(vals[:n]))
    assert hp_norm(v, p) <= hp_norm(v, p + dp) * (1 + 1e-12) + 1e-300


@settings(max_examples=60, deadline=None)
@given(vectors, st.sampled_from([0, 1, 2]))
def test_duality_inequality(data, p):
    d, vals = data
    kmax = 4 if d == 1 else 2
    n = (kmax + 1) ** d
    lam = CoeffVector(d, kmax, np.array(vals[:n]))
    phi = CoeffVector(d, kmax, np.array(vals[n:2 * n]))
    assert abs(pairing(lam, phi)) <= hp_norm(lam, -p) * hp_norm(phi, p) * (1 + 1e-12) + 1e-12


def test_seminorm_examples():
    phi = F.gaussian(1)
    assert seminorm_m_star(phi, 0) == 1.0
    assert seminorm_m_star(phi, 1) == pytest.approx(oracles.gaussian_bump_seminorm(1), rel=1e-6)
    assert seminorm_m_star(phi, 2) == pytest.approx(oracles.gaussian_bump_seminorm(2), rel=1e-5)
    assert seminorm_m_star(phi.dilated(3.0), 0) == 1.0


def test_seminorm_higher_orders_and_grid():
    phi = F.gaussian(1)
    s3 = seminorm_m_star(phi, 3)
    assert s3 >= seminorm_m_star(phi, 2)
    # third derivative (3x - x^3) e^{-x^2/2} is small but finite; weight grows as <x>^3
    assert np.isfinite(s3)
    coarse = seminorm_m_star(phi, 1, ProbeGrid(1, 12.0, 101))
    assert coarse <= seminorm_m_star(phi, 1) + 1e-12
    with pytest.raises(ValueError):
        seminorm_m_star(phi, 5)


def test_test_function_derivatives_match_finite_differences():
    rng = np.random.default_rng(5)
    for phi in (F.gaussian(2, [0.3, -0.2], 0.8), F.odd_gaussian(2, 1, [0.1, 0.4], 1.3)):
        fd = F.from_value(phi.value, d=2, step=1e-4)
        x = rng.normal(size=(50, 2))
        np.testing.assert_allclose(phi.grad(x), fd.grad(x), atol=1e-7)
        np.testing.assert_allclose(phi.hess(x), fd.hess(x), atol=1e-5)


def test_negative_norms_of_simulated_measures_are_finite(bm_small):
    # H_{-p} norms of empirical measures stabilise as the truncation grows, for p = 1, 2, 3
    mu = bm_small.measure(bm_small.steps).batch_item(0)
    lo = hermite_coeffs_measure(mu, HermiteBasis(1, 150))
    hi = hermite_coeffs_measure(mu, HermiteBasis(1, 600))
    for p in (1, 2, 3):
        a, b = hp_norm(lo, -p), hp_norm(hi, -p)
        assert np.isfinite(b) and b >= a
        assert b == pytest.approx(a, rel=0.01)
