"""State-space building blocks: generators, grids, carre du champ."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from fdivlab import models
from fdivlab.errors import (
    DimensionMismatch,
    FamilyMismatch,
    NegativeRate,
    NotNormalizable,
    Reducible,
)


def test_build_finite_generator_rows_sum_to_zero():
    rates = np.array([[0.0, 2.0, 1.0], [0.5, 0.0, 0.5], [1.0, 1.0, 0.0]])
    gen = models.build_finite_generator(rates)
    npt.assert_allclose(gen.rate_matrix.sum(axis=1), 0.0, atol=1e-14)
    # diagonal is rebuilt from the off-diagonal rates
    assert gen.rate_matrix[0, 0] == -3.0
    assert gen.family == models.FINITE
    assert gen.dim == 3


def test_build_finite_generator_ignores_supplied_diagonal():
    gen = models.build_finite_generator(np.array([[99.0, 1.0], [1.0, -7.0]]))
    npt.assert_allclose(gen.rate_matrix, [[-1.0, 1.0], [1.0, -1.0]])


def test_build_finite_generator_rejects_negative_rate():
    with pytest.raises(NegativeRate):
        models.build_finite_generator(np.array([[0.0, -1.0], [1.0, 0.0]]))


def test_finite_generator_rejects_bad_row_sums():
    with pytest.raises(DimensionMismatch):
        models.finite_generator(np.array([[-1.0, 2.0], [1.0, -1.0]]))


def test_finite_generator_rejects_nonsquare():
    with pytest.raises(DimensionMismatch):
        models.finite_generator(np.array([[-1.0, 1.0, 0.0], [1.0, -1.0, 0.0]]))


def test_grid_geometry():
    grid = models.Grid(-2.0, 2.0, 5)
    assert grid.dx == pytest.approx(0.8)
    npt.assert_allclose(grid.centers, [-1.6, -0.8, 0.0, 0.8, 1.6])
    assert len(grid.centers) == 5


def test_grid_validation():
    with pytest.raises(DimensionMismatch):
        models.Grid(1.0, -1.0, 10)
    with pytest.raises(DimensionMismatch):
        models.Grid(0.0, 1.0, 2)


def test_langevin_generator_checks_potential_shape():
    grid = models.Grid(-1.0, 1.0, 8)
    with pytest.raises(DimensionMismatch):
        models.langevin_generator(lambda x: np.float64(0.0), lambda x: 0 * x, grid)


def test_gaussian_generator_scalar_promotes_to_matrix():
    gen = models.gaussian_generator(2.0)
    assert gen.stiffness.shape == (1, 1)
    assert gen.family == models.GAUSSIAN


def test_gaussian_generator_requires_symmetric_positive_definite():
    with pytest.raises(DimensionMismatch):
        models.gaussian_generator(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DimensionMismatch):
        models.gaussian_generator(np.array([[1.0, 0.0], [0.0, -2.0]]))


def test_carre_du_champ_two_state_indicator(two_state):
    # Gamma f (x) = sum_y a(x,y) (f(y)-f(x))^2 with unit rates -> [1, 1]
    f = models.TestFunction(np.array([0.0, 1.0]))
    npt.assert_allclose(models.carre_du_champ(two_state, f), [1.0, 1.0])


def test_carre_du_champ_skewed_hand_value(skewed):
    f = models.TestFunction(np.array([1.0, 3.0]))
    # state 0: rate 2 * (3-1)^2 = 8 ; state 1: rate 0.5 * (1-3)^2 = 2
    npt.assert_allclose(models.carre_du_champ(skewed, f), [8.0, 2.0])


def test_carre_du_champ_langevin_linear():
    grid = models.Grid(-3.0, 3.0, 64)
    gen = models.langevin_generator(lambda x: 0.5 * x**2, lambda x: x, grid)
    f = models.TestFunction(grid.centers.copy())
    # Gamma f = 2 (f')^2, and a linear slope-1 profile gives derivative one
    npt.assert_allclose(models.carre_du_champ(gen, f), 2.0, rtol=1e-12)


def test_carre_du_champ_gaussian_scalar():
    gen = models.gaussian_generator(1.0)
    f = models.TestFunction(np.array([3.0]))
    assert models.carre_du_champ(gen, f) == pytest.approx(18.0)


def test_carre_du_champ_shape_mismatch(two_state):
    with pytest.raises(DimensionMismatch):
        models.carre_du_champ(two_state, models.TestFunction(np.arange(3.0)))


@settings(max_examples=50, deadline=None)
@given(
    scale=st.floats(min_value=0.1, max_value=10.0),
    f0=st.floats(min_value=-5.0, max_value=5.0),
    f1=st.floats(min_value=-5.0, max_value=5.0),
    f2=st.floats(min_value=-5.0, max_value=5.0),
)
def test_carre_du_champ_is_nonnegative_and_quadratic(scale, f0, f1, f2):
    rates = np.array([[0.0, 1.5, 0.2], [0.7, 0.0, 1.0], [0.1, 2.0, 0.0]])
    gen = models.build_finite_generator(rates)
    f = np.array([f0, f1, f2])
    base = models.carre_du_champ(gen, models.TestFunction(f))
    assert np.all(base >= 0.0)
    scaled = models.carre_du_champ(gen, models.TestFunction(scale * f))
    npt.assert_allclose(scaled, scale**2 * base, rtol=1e-9, atol=1e-12)


def test_apply_generator_two_state(two_state):
    f = models.TestFunction(np.array([0.0, 1.0]))
    npt.assert_allclose(models.apply_generator(two_state, f), [1.0, -1.0])


def test_apply_generator_rejects_nonfinite_family():
    gen = models.gaussian_generator(1.0)
    with pytest.raises(FamilyMismatch):
        models.apply_generator(gen, models.TestFunction(np.array([1.0])))


def test_invariant_measure_skewed(skewed):
    pi = models.invariant_measure(skewed)
    npt.assert_allclose(pi.weights, [0.2, 0.8], atol=1e-12)


def test_invariant_measure_reducible_raises():
    block = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 2.0],
            [0.0, 0.0, 2.0, 0.0],
        ]
    )
    with pytest.raises(Reducible):
        models.invariant_measure(models.build_finite_generator(block))


def test_invariant_measure_langevin_boltzmann_ratios():
    grid = models.Grid(-4.0, 4.0, 128)
    gen = models.langevin_generator(lambda x: 0.5 * x**2, lambda x: x, grid)
    pi = models.invariant_measure(gen)
    u = 0.5 * grid.centers**2
    expect = np.exp(-(u - u.min()))
    expect /= expect.sum()
    npt.assert_allclose(pi.weights, expect, rtol=1e-12)
    assert pi.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_invariant_measure_langevin_not_normalizable():
    grid = models.Grid(-1.0, 1.0, 16)
    with pytest.raises(NotNormalizable):
        models.invariant_measure(
            models.langevin_generator(
                lambda x: np.full_like(x, -np.inf), lambda x: 0 * x, grid
            )
        )


def test_invariant_measure_gaussian():
    gen = models.gaussian_generator(np.array([[2.0]]))
    pi = models.invariant_measure(gen)
    npt.assert_allclose(pi.mean, [0.0])
    npt.assert_allclose(pi.cov, [[0.5]])


def test_dirichlet_energy_two_state(two_state):
    # pi = [1/2, 1/2], Gamma f = [1, 1] for the indicator -> energy 1
    f = models.TestFunction(np.array([0.0, 1.0]))
    assert models.dirichlet_energy(two_state, f) == pytest.approx(1.0)


def test_dirichlet_energy_skewed(skewed):
    f = models.TestFunction(np.array([0.0, 1.0]))
    # pi = [0.2, 0.8]; Gamma f = [2*1, 0.5*1] -> 0.2*2 + 0.8*0.5 = 0.8
    assert models.dirichlet_energy(skewed, f) == pytest.approx(0.8)


def test_test_function_is_frozen():
    f = models.TestFunction(np.array([1.0, 2.0]))
    with pytest.raises(AttributeError):
        f.values = np.zeros(2)


def test_grad_on_grid_exact_for_linear():
    grid = models.Grid(0.0, 1.0, 21)
    vals = 3.0 * grid.centers + 1.0
    npt.assert_allclose(models.grad_on_grid(vals, grid.dx), 3.0, rtol=1e-12)
