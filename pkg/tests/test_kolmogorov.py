"""Forward flows, dissipation identities, and the energy ledger."""

import math

import numpy as np
import numpy.testing as npt
import pytest
import scipy.linalg

from fdivlab import kolmogorov, measures, models
from fdivlab.errors import (
    DimensionMismatch,
    FamilyMismatch,
    FdivlabError,
    NonPositiveSeries,
    StepTooLarge,
    ZeroDensityCell,
)


def _ou_grid(n=128, half_width=6.0):
    grid = models.Grid(-half_width, half_width, n)
    gen = models.langevin_generator(lambda x: 0.5 * x**2, lambda x: x, grid)
    return grid, gen


# ---------------------------------------------------------------------------
# discrete operators
# ---------------------------------------------------------------------------

def test_fokker_planck_operator_structure():
    grid = models.Grid(-3.0, 3.0, 48)
    u = 0.5 * grid.centers**2
    L = kolmogorov.fokker_planck_operator(u, grid)
    npt.assert_allclose(L.sum(axis=0), 0.0, atol=1e-10)
    off = L - np.diag(np.diag(L))
    assert off.min() >= 0.0


def test_fokker_planck_boltzmann_is_stationary():
    grid = models.Grid(-4.0, 4.0, 64)
    u = 0.5 * grid.centers**2 + 0.3 * grid.centers
    L = kolmogorov.fokker_planck_operator(u, grid)
    w = np.exp(-(u - u.min()))
    w /= w.sum()
    npt.assert_allclose(L @ w, 0.0, atol=1e-13)


def test_grid_jump_generator_is_conservative():
    _, gen = _ou_grid(32, 4.0)
    jump = kolmogorov.grid_jump_generator(gen)
    assert jump.family == models.FINITE
    npt.assert_allclose(jump.rate_matrix.sum(axis=1), 0.0, atol=1e-10)
    with pytest.raises(FamilyMismatch):
        kolmogorov.grid_jump_generator(jump)


# ---------------------------------------------------------------------------
# forward evolution
# ---------------------------------------------------------------------------

def test_evolve_forward_finite_matches_matrix_exponential(two_state, mu_nu):
    mu, _ = mu_nu
    flow = kolmogorov.evolve_forward(two_state, mu, T=0.7, dt=0.07)
    want = mu.weights @ scipy.linalg.expm(two_state.rate_matrix * 0.7)
    npt.assert_allclose(flow.measures[-1].weights, want, atol=1e-13)
    assert flow.times[0] == 0.0 and flow.times[-1] == pytest.approx(0.7)


def test_evolve_forward_ou_moments():
    gen = models.gaussian_generator(1.0)
    mu0 = measures.gaussian_measure(1.0, 1.0)
    flow = kolmogorov.evolve_forward(gen, mu0, T=1.0, dt=1e-2)
    final = flow.measures[-1]
    # mean contracts at rate one; unit variance is the flow's fixed point
    assert final.mean[0] == pytest.approx(math.exp(-1.0), rel=1e-8)
    assert final.cov[0, 0] == pytest.approx(1.0, abs=1e-13)


def test_evolve_forward_requires_divisible_horizon(two_state, mu_nu):
    mu, _ = mu_nu
    with pytest.raises(DimensionMismatch):
        kolmogorov.evolve_forward(two_state, mu, T=1.0, dt=0.3)


def test_evolve_forward_rejects_protocol_on_finite_chain(two_state, mu_nu):
    mu, _ = mu_nu
    proto = kolmogorov.Protocol(
        family=models.GAUSSIAN, stiffness_path=lambda t: np.eye(1)
    )
    with pytest.raises(FamilyMismatch):
        kolmogorov.evolve_forward(two_state, mu, T=0.1, dt=0.05, protocol=proto)


def test_evolve_forward_store_every(two_state, mu_nu):
    mu, _ = mu_nu
    flow = kolmogorov.evolve_forward(two_state, mu, T=1.0, dt=0.1, store_every=3)
    npt.assert_allclose(flow.times, [0.0, 0.3, 0.6, 0.9, 1.0])
    assert len(flow.measures) == 5


def test_evolve_forward_langevin_conserves_mass():
    grid, gen = _ou_grid(64, 4.0)
    mu0 = measures.discretize_gaussian(0.5, 0.5, grid)
    flow = kolmogorov.evolve_forward(gen, mu0, T=0.1, dt=2e-3)
    assert flow.mass_drift < 1e-12
    assert flow.measures[-1].weights.min() >= 0.0


def test_evolve_forward_langevin_step_too_large():
    grid = models.Grid(-4.0, 4.0, 256)
    gen = models.langevin_generator(lambda x: 0.5 * x**2, lambda x: x, grid)
    mu0 = measures.discretize_gaussian(0.0, 1.0, grid)
    with pytest.raises(StepTooLarge):
        kolmogorov.evolve_forward(gen, mu0, T=0.1, dt=1e-2)


# ---------------------------------------------------------------------------
# divergence flow and dissipation residuals
# ---------------------------------------------------------------------------

def test_divergence_flow_monotone_and_consistent(two_state, mu_nu):
    mu, nu = mu_nu
    res = kolmogorov.divergence_flow(two_state, mu, nu, T=1.0, dt=1e-2)
    assert np.all(np.diff(res.kl) <= 1e-12)
    assert np.all(np.diff(res.chi2) <= 1e-12)
    assert res.max_residual_kl < 1e-3
    assert res.max_residual_chi2 < 1e-3
    # boundary residuals are undefined for centered differences
    assert np.isnan(res.residual_kl[0]) and np.isnan(res.residual_kl[-1])


def test_divergence_flow_identical_laws_is_flat(two_state):
    mu = measures.finite_measure(np.array([0.7, 0.3]))
    nu = measures.finite_measure(np.array([0.7, 0.3]))
    res = kolmogorov.divergence_flow(two_state, mu, nu, T=0.2, dt=1e-2)
    assert np.all(res.kl == 0.0)
    assert np.all(res.chi2 == 0.0)
    out = kolmogorov.residual_order(two_state, mu, nu, T=0.2, dt_list=[0.1, 0.05])
    assert out["order_kl"] == np.inf


def test_residual_order_is_second_order(two_state, mu_nu):
    mu, nu = mu_nu
    out = kolmogorov.residual_order(
        two_state, mu, nu, T=0.5, dt_list=[2e-2, 1e-2, 5e-3]
    )
    assert out["order_kl"] >= 1.9
    assert out["order_chi2"] >= 1.9
    assert out["dt"] == [2e-2, 1e-2, 5e-3]
    assert all(r > 0 for r in out["residual_kl"])


# ---------------------------------------------------------------------------
# Poincare constants and decay fits
# ---------------------------------------------------------------------------

def test_poincare_constant_finite(two_state, skewed):
    assert kolmogorov.poincare_constant(two_state) == pytest.approx(4.0, abs=1e-9)
    assert kolmogorov.poincare_constant(skewed) == pytest.approx(5.0, abs=1e-9)


def test_poincare_constant_gaussian():
    gen = models.gaussian_generator(np.array([[2.0]]))
    assert kolmogorov.poincare_constant(gen) == pytest.approx(4.0)


def test_poincare_constant_langevin_ou():
    _, gen = _ou_grid(128, 6.0)
    c = kolmogorov.poincare_constant(gen)
    assert abs(c - 2.0) < 2e-2


def test_decay_rate_fit_exact_exponential():
    t = np.linspace(0.0, 2.0, 81)
    series = 3.0 * np.exp(-3.0 * t)
    assert kolmogorov.decay_rate_fit(t, series) == pytest.approx(-3.0, rel=1e-12)


def test_decay_rate_fit_validation():
    t = np.linspace(0.0, 1.0, 11)
    bad = np.exp(-t)
    bad[-1] = 0.0
    with pytest.raises(NonPositiveSeries):
        kolmogorov.decay_rate_fit(t, bad)
    with pytest.raises(DimensionMismatch):
        kolmogorov.decay_rate_fit(t, np.ones(5))


# ---------------------------------------------------------------------------
# entropy and free energy
# ---------------------------------------------------------------------------

def test_entropy_gaussian_closed_form():
    mu = measures.gaussian_measure(0.3, 2.0)
    want = 0.5 * math.log(2.0 * math.pi * math.e * 2.0)
    assert kolmogorov.entropy(mu) == pytest.approx(want, rel=1e-14)


def test_entropy_uniform_grid_is_zero():
    grid = models.Grid(0.0, 1.0, 50)
    mu = measures.grid_measure(np.full(50, 0.02), grid)
    assert kolmogorov.entropy(mu) == pytest.approx(0.0, abs=1e-14)


def test_entropy_rejects_finite_measures(mu_nu):
    mu, _ = mu_nu
    with pytest.raises(FamilyMismatch):
        kolmogorov.entropy(mu)


def test_free_energy_of_boltzmann_is_minus_log_partition():
    grid = models.Grid(-2.0, 2.0, 64)
    u = grid.centers**2
    w = np.exp(-u)
    w /= w.sum()
    mu = measures.grid_measure(w, grid)
    want = -math.log(np.sum(np.exp(-u)) * grid.dx)
    assert kolmogorov.free_energy(mu, u) == pytest.approx(want, rel=1e-12)


def test_gaussian_free_energy_at_equilibrium():
    k = 2.0
    mu = measures.gaussian_measure(0.7, 1.0 / k)
    got = kolmogorov.gaussian_free_energy(mu, np.array([[k]]), np.array([0.7]))
    assert got == pytest.approx(-0.5 * math.log(2.0 * math.pi / k), rel=1e-12)


# ---------------------------------------------------------------------------
# second law
# ---------------------------------------------------------------------------

def test_second_law_report_rejects_negative_dissipation():
    with pytest.raises(FdivlabError):
        kolmogorov.SecondLawReport(
            work=0.0, delta_f=1.0, info_integral=0.0, residual=0.0
        )


def test_protocol_stiffness_must_be_positive_definite():
    proto = kolmogorov.Protocol(
        family=models.GAUSSIAN, stiffness_path=lambda t: np.array([[-1.0]])
    )
    with pytest.raises(FdivlabError):
        proto.stiffness(0.0)
    ok = kolmogorov.Protocol(
        family=models.GAUSSIAN, stiffness_path=lambda t: np.array([[1.0]])
    )
    npt.assert_allclose(ok.center(0.0), [0.0])


def test_second_law_gaussian_protocol():
    proto = kolmogorov.Protocol(
        family=models.GAUSSIAN,
        stiffness_path=lambda t: np.array([[1.0 + 0.5 * math.sin(t)]]),
        center_path=lambda t: np.array([0.5 * t]),
    )
    mu0 = measures.gaussian_measure(0.0, 1.0)
    rep = kolmogorov.second_law_run(proto, mu0, T=1.0, dt=1e-3)
    assert rep.work - rep.delta_f >= 0.0
    assert rep.residual < 1e-4
    assert rep.info_integral >= 0.0


def test_second_law_langevin_relaxation():
    grid = models.Grid(-6.0, 6.0, 128)
    proto = kolmogorov.Protocol(
        family=models.LANGEVIN,
        potential=lambda t, x: 0.5 * x**2,
        dpotential_dt=lambda t, x: np.zeros_like(x),
        grid=grid,
    )
    mu0 = measures.discretize_gaussian(1.0, 1.0, grid)
    rep = kolmogorov.second_law_run(proto, mu0, T=1.0, dt=1e-3)
    # static potential: no work, so -dF must equal the dissipation integral
    assert abs(rep.work) < 1e-12
    assert rep.residual < 5e-3
    assert rep.delta_f < 0.0


# ---------------------------------------------------------------------------
# dissipation velocity
# ---------------------------------------------------------------------------

def test_dissipation_velocity_unit_shift():
    grid = models.Grid(-10.0, 10.0, 1024)
    mu = measures.discretize_gaussian(1.0, 1.0, grid)
    v, info = kolmogorov.dissipation_velocity(mu, 0.5 * grid.centers**2)
    mid = slice(200, 824)
    npt.assert_allclose(np.abs(v[mid]), 1.0, atol=1e-6)
    assert abs(info - 1.0) < 1e-3


def test_dissipation_velocity_wide_gaussian():
    grid = models.Grid(-12.0, 12.0, 1024)
    mu = measures.discretize_gaussian(0.0, 4.0, grid)
    v, info = kolmogorov.dissipation_velocity(mu, 0.5 * grid.centers**2)
    mid = slice(300, 724)
    npt.assert_allclose(np.abs(v[mid]), 0.75 * np.abs(grid.centers[mid]), atol=1e-4)
    assert abs(info - 2.25) < 1e-3


def test_dissipation_velocity_needs_contiguous_support():
    grid = models.Grid(0.0, 1.0, 5)
    mu = measures.grid_measure(np.array([0.3, 0.0, 0.3, 0.0, 0.4]), grid)
    with pytest.raises(ZeroDensityCell):
        kolmogorov.dissipation_velocity(mu, np.zeros(5))
    thin = measures.grid_measure(np.array([0.5, 0.5, 0.0, 0.0, 0.0]), grid)
    with pytest.raises(ZeroDensityCell):
        kolmogorov.dissipation_velocity(thin, np.zeros(5))


def test_dissipation_velocity_rejects_finite_measures(mu_nu):
    mu, _ = mu_nu
    with pytest.raises(FamilyMismatch):
        kolmogorov.dissipation_velocity(mu, np.zeros(2))
