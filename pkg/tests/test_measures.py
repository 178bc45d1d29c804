"""Divergences, likelihood ratios, and dissipation functionals."""

import math

import numpy as np
import numpy.testing as npt
import pytest
import scipy.integrate
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from fdivlab import measures, models
from fdivlab.errors import (
    AbsoluteContinuityViolated,
    DimensionMismatch,
    FamilyMismatch,
    FdivlabError,
    NotNormalizable,
)

LOG9 = math.log(9.0)


# ---------------------------------------------------------------------------
# constructors and basic plumbing
# ---------------------------------------------------------------------------

def test_finite_measure_validation():
    with pytest.raises(DimensionMismatch):
        measures.finite_measure(np.array([0.5, 0.4]))
    with pytest.raises(DimensionMismatch):
        measures.finite_measure(np.array([1.5, -0.5]))
    with pytest.raises(DimensionMismatch):
        measures.finite_measure(np.eye(2))


def test_gaussian_measure_validation():
    with pytest.raises(DimensionMismatch):
        measures.gaussian_measure([0.0, 0.0], np.eye(3))
    with pytest.raises(DimensionMismatch):
        measures.gaussian_measure([0.0, 0.0], np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DimensionMismatch):
        measures.gaussian_measure(0.0, -1.0)
    m = measures.gaussian_measure(1.0, 2.0)
    assert m.mean.shape == (1,)
    assert m.cov.shape == (1, 1)


def test_grid_measure_needs_matching_length():
    grid = models.Grid(0.0, 1.0, 4)
    with pytest.raises(DimensionMismatch):
        measures.grid_measure(np.full(5, 0.2), grid)


def test_expect_finite_and_gaussian(mu_nu):
    mu, _ = mu_nu
    assert mu.expect(np.array([0.0, 10.0])) == pytest.approx(1.0)
    g = measures.gaussian_measure(0.0, 1.0)
    with pytest.raises(FamilyMismatch):
        g.expect(np.array([1.0]))


def test_discretize_gaussian_moments():
    grid = models.Grid(-8.0, 8.0, 512)
    m = measures.discretize_gaussian(0.0, 1.0, grid)
    assert m.weights.sum() == pytest.approx(1.0, abs=1e-12)
    mean = m.expect(grid.centers)
    var = m.expect(grid.centers**2) - mean**2
    assert abs(mean) < 1e-12
    assert abs(var - 1.0) < 1e-3


def test_discretize_gaussian_off_grid_raises():
    grid = models.Grid(-1.0, 1.0, 8)
    with pytest.raises(NotNormalizable):
        measures.discretize_gaussian(1e6, 1.0, grid)


def test_rn_derivative_two_state(mu_nu):
    mu, nu = mu_nu
    gamma = measures.rn_derivative(mu, nu)
    npt.assert_allclose(gamma.values, [1.8, 0.2])
    assert np.dot(gamma.nu_weights, gamma.values) == pytest.approx(1.0)


def test_rn_derivative_absolute_continuity():
    mu = measures.finite_measure(np.array([0.5, 0.5]))
    nu = measures.finite_measure(np.array([1.0, 0.0]))
    with pytest.raises(AbsoluteContinuityViolated):
        measures.rn_derivative(mu, nu)


def test_likelihood_ratio_validation():
    with pytest.raises(FdivlabError):
        measures.LikelihoodRatio(
            kind="finite",
            values=np.array([-0.1, 1.1]),
            nu_weights=np.array([0.5, 0.5]),
        )
    with pytest.raises(FdivlabError):
        measures.LikelihoodRatio(
            kind="finite",
            values=np.array([2.0, 2.0]),
            nu_weights=np.array([0.5, 0.5]),
        )


def test_cross_kind_divergence_rejected(mu_nu):
    mu, _ = mu_nu
    g = measures.gaussian_measure(0.0, 1.0)
    with pytest.raises(FamilyMismatch):
        measures.divergence("kl", mu, g)


# ---------------------------------------------------------------------------
# discrete closed forms
# ---------------------------------------------------------------------------

def test_finite_divergences_hand_values(mu_nu):
    mu, nu = mu_nu
    kl = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert measures.divergence("kl", mu, nu) == pytest.approx(kl, rel=1e-14)
    assert measures.divergence("chi2", mu, nu) == pytest.approx(0.64, rel=1e-14)
    assert measures.divergence("tv", mu, nu) == pytest.approx(0.4, rel=1e-14)


def test_identical_measures_give_exact_zero(mu_nu):
    mu, _ = mu_nu
    other = measures.finite_measure(np.array([0.9, 0.1]))
    for kind in ("kl", "chi2", "tv"):
        assert measures.divergence(kind, mu, other) == 0.0


def test_infinite_kl_chi2_with_finite_tv():
    mu = measures.finite_measure(np.array([0.5, 0.5]))
    nu = measures.finite_measure(np.array([1.0, 0.0]))
    assert measures.divergence("kl", mu, nu) == np.inf
    assert measures.divergence("chi2", mu, nu) == np.inf
    assert measures.divergence("tv", mu, nu) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# Gaussian closed forms, checked against direct quadrature
# ---------------------------------------------------------------------------

def _gauss_pdf(x, m, v):
    return np.exp(-0.5 * (x - m) ** 2 / v) / np.sqrt(2.0 * np.pi * v)


def test_gaussian_kl_unit_shift():
    mu = measures.gaussian_measure(1.0, 1.0)
    nu = measures.gaussian_measure(0.0, 1.0)
    assert measures.divergence("kl", mu, nu) == pytest.approx(0.5, rel=1e-14)


def test_gaussian_chi2_unit_shift():
    mu = measures.gaussian_measure(1.0, 1.0)
    nu = measures.gaussian_measure(0.0, 1.0)
    assert measures.divergence("chi2", mu, nu) == pytest.approx(
        math.e - 1.0, rel=1e-14
    )


def test_gaussian_tv_equal_variance():
    mu = measures.gaussian_measure(1.0, 1.0)
    nu = measures.gaussian_measure(0.0, 1.0)
    want = 2.0 * norm.cdf(0.5) - 1.0
    assert measures.divergence("tv", mu, nu) == pytest.approx(want, rel=1e-12)
    assert measures.divergence("tv", nu, mu) == pytest.approx(want, rel=1e-12)


def test_gaussian_chi2_diverges_at_double_variance():
    nu = measures.gaussian_measure(0.0, 1.0)
    assert measures.divergence("chi2", measures.gaussian_measure(0.0, 2.5), nu) == np.inf
    assert measures.divergence("chi2", measures.gaussian_measure(0.0, 2.0), nu) == np.inf
    assert np.isfinite(
        measures.divergence("chi2", measures.gaussian_measure(0.0, 1.9), nu)
    )


def test_gaussian_closed_forms_match_quadrature():
    m1, v1, m0, v0 = 0.3, 0.5, 0.0, 1.0
    mu = measures.gaussian_measure(m1, v1)
    nu = measures.gaussian_measure(m0, v0)

    def kl_integrand(x):
        p = _gauss_pdf(x, m1, v1)
        q = _gauss_pdf(x, m0, v0)
        return p * (np.log(p) - np.log(q))

    def chi2_integrand(x):
        return _gauss_pdf(x, m1, v1) ** 2 / _gauss_pdf(x, m0, v0)

    def tv_integrand(x):
        return 0.5 * np.abs(_gauss_pdf(x, m1, v1) - _gauss_pdf(x, m0, v0))

    kl_ref = scipy.integrate.quad(kl_integrand, -30, 30, limit=200)[0]
    chi2_ref = scipy.integrate.quad(chi2_integrand, -30, 30, limit=200)[0] - 1.0
    tv_ref = scipy.integrate.quad(tv_integrand, -30, 30, limit=400)[0]

    assert measures.divergence("kl", mu, nu) == pytest.approx(kl_ref, abs=1e-9)
    assert measures.divergence("chi2", mu, nu) == pytest.approx(chi2_ref, abs=1e-9)
    assert measures.divergence("tv", mu, nu) == pytest.approx(tv_ref, abs=1e-9)


def test_gaussian_closed_forms_match_grid_quadrature():
    # Dense-grid discretization of both laws reproduces every closed form.
    grid = models.Grid(-8.0, 8.0, 512)
    mu = measures.gaussian_measure(1.0, 1.0)
    nu = measures.gaussian_measure(0.0, 1.0)
    mu_g = measures.discretize_gaussian(1.0, 1.0, grid)
    nu_g = measures.discretize_gaussian(0.0, 1.0, grid)
    for kind in ("kl", "chi2", "tv"):
        exact = measures.divergence(kind, mu, nu)
        approx = measures.divergence(kind, mu_g, nu_g)
        assert abs(exact - approx) < 1e-4


# ---------------------------------------------------------------------------
# the Pinsker-type sandwich 2 tv^2 <= kl <= chi2
# ---------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(
    p=st.lists(st.floats(min_value=1e-3, max_value=1.0), min_size=4, max_size=4),
    q=st.lists(st.floats(min_value=1e-3, max_value=1.0), min_size=4, max_size=4),
)
def test_divergence_sandwich_property(p, q):
    mu = measures.finite_measure(np.array(p) / np.sum(p))
    nu = measures.finite_measure(np.array(q) / np.sum(q))
    kl = measures.divergence("kl", mu, nu)
    chi2 = measures.divergence("chi2", mu, nu)
    tv = measures.divergence("tv", mu, nu)
    assert 2.0 * tv**2 <= kl + 1e-12
    assert kl <= chi2 + 1e-12


def test_divergence_report_flags(mu_nu):
    mu, nu = mu_nu
    rep = measures.divergence_report(mu, nu)
    assert not rep.kl_infinite and not rep.chi2_infinite
    assert rep.chi2 == pytest.approx(0.64)
    with pytest.raises(FdivlabError):
        measures.DivergenceReport(kl=0.01, chi2=1.0, tv=0.4)  # breaks 2tv^2 <= kl
    with pytest.raises(FdivlabError):
        measures.DivergenceReport(kl=2.0, chi2=1.0, tv=0.1)  # breaks kl <= chi2


# ---------------------------------------------------------------------------
# dissipation functionals
# ---------------------------------------------------------------------------

def test_fisher_information_two_state(mu_nu, two_state):
    mu, nu = mu_nu
    # Gamma gamma = (1.8 - 0.2)^2 = 2.56 in both states; nu-average is 2.56
    got = measures.fisher_information(mu, nu, two_state)
    assert got == pytest.approx(2.56, rel=1e-14)


def test_fisher_information_gaussian_cases():
    gen = models.gaussian_generator(1.0)
    nu = measures.gaussian_measure(0.0, 1.0)
    assert measures.fisher_information(
        measures.gaussian_measure(1.0, 1.0), nu, gen
    ) == pytest.approx(1.0, rel=1e-12)
    assert measures.fisher_information(
        measures.gaussian_measure(0.0, 4.0), nu, gen
    ) == pytest.approx(2.25, rel=1e-12)


def test_fisher_information_identical_is_zero(two_state):
    mu = measures.finite_measure(np.array([0.3, 0.7]))
    assert measures.fisher_information(mu, mu, two_state) == 0.0


def test_fisher_information_infinite_on_support_gap(two_state):
    mu = measures.finite_measure(np.array([1.0, 0.0]))
    nu = measures.finite_measure(np.array([0.5, 0.5]))
    assert measures.fisher_information(mu, nu, two_state) == np.inf


def test_fisher_information_family_mismatch(mu_nu):
    mu, nu = mu_nu
    with pytest.raises(FamilyMismatch):
        measures.fisher_information(mu, nu, models.gaussian_generator(1.0))


def test_kl_dissipation_rate_two_state(mu_nu, two_state):
    mu, nu = mu_nu
    # nu is invariant here, so the rate reduces to -nu(gamma * A log gamma)
    want = 0.5 * (-1.6 + 1.8 * LOG9) + 0.5 * (1.6 - 0.2 * LOG9)
    got = measures.kl_dissipation_rate(mu, nu, two_state)
    assert got == pytest.approx(want, rel=1e-13)
    assert got > 0.0


def test_kl_rate_below_chi2_rate_on_jump_chains(mu_nu, two_state):
    # jump-chain entropy dissipation is strictly below the carre-du-champ form
    mu, nu = mu_nu
    kl_rate = measures.kl_dissipation_rate(mu, nu, two_state)
    fisher = measures.fisher_information(mu, nu, two_state)
    assert kl_rate < fisher - 0.5


def test_kl_dissipation_rate_gaussian_matches_fisher():
    gen = models.gaussian_generator(1.0)
    mu = measures.gaussian_measure(1.0, 1.0)
    nu = measures.gaussian_measure(0.0, 1.0)
    assert measures.kl_dissipation_rate(mu, nu, gen) == measures.fisher_information(
        mu, nu, gen
    )


def test_kl_dissipation_rate_identical_is_zero(two_state):
    mu = measures.finite_measure(np.array([0.25, 0.75]))
    assert measures.kl_dissipation_rate(mu, mu, two_state) == 0.0


def test_kl_dissipation_rate_infinite_influx(two_state):
    mu = measures.finite_measure(np.array([1.0, 0.0]))
    nu = measures.finite_measure(np.array([0.5, 0.5]))
    assert measures.kl_dissipation_rate(mu, nu, two_state) == np.inf
