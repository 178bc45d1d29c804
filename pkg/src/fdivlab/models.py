"""Model families, generators, and carre-du-champ operators.

Three families share one Generator interface:

* ``FINITE``      -- continuous-time jump process on d states, rate matrix A
                     (rows sum to zero, non-negative off-diagonal).
* ``LANGEVIN``    -- overdamped scalar diffusion dX = -U'(X) dt + sqrt(2) dB,
                     with densities represented on a uniform cell grid.
* ``GAUSSIAN``    -- linear drift dX = -K X dt + sqrt(2) dB, K symmetric
                     positive definite; laws stay Gaussian.

The carre du champ is normalized so that Gamma(f) = 2 |f'|^2 for diffusions,
matching the convention in which the Fisher information of a Gaussian shift
is mu(|grad log gamma|^2).
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    FamilyMismatch,
    NegativeRate,
    NotNormalizable,
    Reducible,
)

FINITE = "finite-state"
LANGEVIN = "langevin-1d"
GAUSSIAN = "linear-gaussian"

_ROW_SUM_TOL = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Grid:
    """Uniform cell grid on [x_min, x_max] with n cells.

    Cell i has width dx = (x_max - x_min)/n and center x_min + (i + 1/2) dx.
    Grid measures are mass vectors over cells; densities are mass/dx.
    """

    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise DimensionMismatch("grid needs x_max > x_min")
        if self.n < 3:
            raise DimensionMismatch("grid needs at least 3 cells")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n

    @property
    def centers(self) -> np.ndarray:
        i = np.arange(self.n)
        return self.x_min + (i + 0.5) * self.dx


@dataclass(frozen=True)
class Generator:
    """Markov generator for one of the three model families.

    Use the constructors below rather than filling fields by hand:
    :func:`build_finite_generator`, :func:`finite_generator`,
    :func:`langevin_generator`, :func:`gaussian_generator`.
    """

    family: str
    rate_matrix: Optional[np.ndarray] = None          # FINITE
    grid: Optional[Grid] = None                       # LANGEVIN
    potential_values: Optional[np.ndarray] = None     # LANGEVIN: U at centers
    potential: Optional[Callable] = None              # LANGEVIN: U(x)
    grad_potential: Optional[Callable] = None         # LANGEVIN: U'(x)
    stiffness: Optional[np.ndarray] = None            # GAUSSIAN: K

    @property
    def dim(self) -> int:
        if self.family == FINITE:
            return self.rate_matrix.shape[0]
        if self.family == LANGEVIN:
            return self.grid.n
        return self.stiffness.shape[0]


@dataclass(frozen=True)
class TestFunction:
    """Observable in the family's native parameterization.

    FINITE: values on states.  LANGEVIN: samples at grid cell centers.
    GAUSSIAN: coefficient vector c of the linear functional f(x) = c . x.
    """

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(np.atleast_1d(self.values)))


def _as_values(f: Union[TestFunction, np.ndarray]) -> np.ndarray:
    if isinstance(f, TestFunction):
        return f.values
    return np.asarray(f, dtype=float)


def build_finite_generator(rates: np.ndarray) -> Generator:
    """Build a FINITE generator from off-diagonal jump rates.

    The diagonal of ``rates`` is ignored and replaced by the negative row sum
    of the off-diagonal part, so rows sum to zero exactly.
    """
    A = np.array(rates, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"rate matrix must be square, got {A.shape}")
    off = A - np.diag(np.diag(A))
    if np.any(off < 0.0):
        raise NegativeRate("off-diagonal jump rates must be non-negative")
    np.fill_diagonal(off, 0.0)
    A = off - np.diag(off.sum(axis=1))
    return Generator(family=FINITE, rate_matrix=_frozen(A))


def finite_generator(A: np.ndarray) -> Generator:
    """Wrap an explicit rate matrix (rows must already sum to ~0)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"rate matrix must be square, got {A.shape}")
    off = A - np.diag(np.diag(A))
    if np.any(off < -1e-12):
        raise NegativeRate("off-diagonal jump rates must be non-negative")
    if np.max(np.abs(A.sum(axis=1))) > _ROW_SUM_TOL:
        raise DimensionMismatch("rate matrix rows must sum to zero")
    return Generator(family=FINITE, rate_matrix=_frozen(A))


def langevin_generator(potential: Callable, grad_potential: Callable, grid: Grid) -> Generator:
    """Overdamped Langevin generator with unit temperature.

    ``potential`` and ``grad_potential`` are vectorized callables on floats;
    the potential is also sampled at cell centers for density work.
    """
    u = np.asarray(potential(grid.centers), dtype=float)
    if u.shape != (grid.n,):
        raise DimensionMismatch("potential(centers) must return one value per cell")
    return Generator(
        family=LANGEVIN,
        grid=grid,
        potential_values=_frozen(u),
        potential=potential,
        grad_potential=grad_potential,
    )


def gaussian_generator(K: np.ndarray) -> Generator:
    """Linear-drift generator dX = -K X dt + sqrt(2) dB with K sym. pos. def."""
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        K = K.reshape(1, 1)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionMismatch(f"stiffness matrix must be square, got {K.shape}")
    if np.max(np.abs(K - K.T)) > 1e-12:
        raise DimensionMismatch("stiffness matrix must be symmetric")
    if np.min(scipy.linalg.eigvalsh(K)) <= 0.0:
        raise DimensionMismatch("stiffness matrix must be positive definite")
    return Generator(family=GAUSSIAN, stiffness=_frozen(K))


def grad_on_grid(values: np.ndarray, dx: float) -> np.ndarray:
    """First derivative on a uniform grid: central interior, one-sided edges."""
    return np.gradient(np.asarray(values, dtype=float), dx, edge_order=1)


def carre_du_champ(gen: Generator, f: Union[TestFunction, np.ndarray]):
    """Carre du champ Gamma(f) in the family's native representation.

    FINITE: vector with entries sum_y A(x,y) (f(x) - f(y))^2.
    LANGEVIN: vector 2 (f')^2 on cell centers (finite differences).
    GAUSSIAN (linear f = c.x): the constant 2 |c|^2, returned as a float.
    """
    v = _as_values(f)
    if gen.family == FINITE:
        A = gen.rate_matrix
        if v.shape != (A.shape[0],):
            raise DimensionMismatch("test function length must match state count")
        diff2 = (v[:, None] - v[None, :]) ** 2
        return np.einsum("xy,xy->x", A, diff2)
    if gen.family == LANGEVIN:
        if v.shape != (gen.grid.n,):
            raise DimensionMismatch("test function must be sampled on the grid")
        g = grad_on_grid(v, gen.grid.dx)
        return 2.0 * g * g
    if gen.family == GAUSSIAN:
        if v.shape != (gen.stiffness.shape[0],):
            raise DimensionMismatch("linear coefficient length must match dimension")
        return float(2.0 * np.dot(v, v))
    raise FamilyMismatch(f"unknown family {gen.family!r}")


def apply_generator(gen: Generator, f: Union[TestFunction, np.ndarray]) -> np.ndarray:
    """Apply the generator to a test function (FINITE only): (A f)(x)."""
    if gen.family != FINITE:
        raise FamilyMismatch("apply_generator is only defined for finite-state models")
    v = _as_values(f)
    if v.shape != (gen.rate_matrix.shape[0],):
        raise DimensionMismatch("test function length must match state count")
    return gen.rate_matrix @ v


def invariant_measure(gen: Generator):
    """Invariant distribution of the generator.

    FINITE: probability vector spanning the null space of A^T (Reducible if
    that space has dimension > 1).  LANGEVIN: cell masses proportional to
    exp(-U) at centers.  GAUSSIAN: moment pair (0, K^{-1}).
    Returns a :class:`fdivlab.measures.Measure`.
    """
    from . import measures  # local import to avoid a cycle

    if gen.family == FINITE:
        A = gen.rate_matrix
        ns = scipy.linalg.null_space(A.T, rcond=1e-10)
        if ns.shape[1] != 1:
            raise Reducible(
                f"invariant distribution is not unique (null space dim {ns.shape[1]})"
            )
        p = ns[:, 0]
        p = p * np.sign(p.sum())
        if np.min(p) < -1e-10:
            raise Reducible("null space vector is not signed; chain is reducible")
        p = np.clip(p, 0.0, None)
        return measures.finite_measure(p / p.sum())
    if gen.family == LANGEVIN:
        u = gen.potential_values
        if np.any(np.isnan(u)) or np.any(np.isneginf(u)):
            raise NotNormalizable("potential must be bounded below and well defined")
        w = np.exp(-(u - np.min(u[np.isfinite(u)])))
        total = w.sum()
        if not np.isfinite(total) or total <= 0.0:
            raise NotNormalizable("exp(-U) has no usable mass on the grid")
        return measures.grid_measure(w / total, gen.grid)
    if gen.family == GAUSSIAN:
        K = gen.stiffness
        cov = scipy.linalg.inv(K)
        cov = 0.5 * (cov + cov.T)
        return measures.gaussian_measure(np.zeros(K.shape[0]), cov)
    raise FamilyMismatch(f"unknown family {gen.family!r}")


def dirichlet_energy(gen: Generator, f: Union[TestFunction, np.ndarray]) -> float:
    """Dirichlet energy E(f) = invariant_measure(Gamma f)."""
    gamma = carre_du_champ(gen, f)
    mu_bar = invariant_measure(gen)
    if gen.family == FINITE:
        return float(np.dot(mu_bar.weights, gamma))
    if gen.family == LANGEVIN:
        return float(np.dot(mu_bar.weights, gamma))
    # GAUSSIAN linear functional: Gamma is constant.
    return float(gamma)
