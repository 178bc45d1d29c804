"""Probability measures, likelihood ratios, and f-divergences.

Measures come in three representations matching the model families: weight
vectors on finite states, mass vectors on grid cells, and Gaussian moment
pairs.  Divergences implement the conventions

    0 * log 0 = 0,      0 / 0 = 0,

a support mass threshold of 1e-12 (mu-mass below it is ignored when checking
absolute continuity) and a null threshold of 1e-300 (nu-mass below it counts
as zero).  KL and chi-square return +inf (flagged in reports) when mu is not
absolutely continuous w.r.t. nu; total variation is always finite.
"""

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg
from scipy.special import ndtr

from . import models
from .errors import (
    AbsoluteContinuityViolated,
    DimensionMismatch,
    FamilyMismatch,
    FdivlabError,
    NotNormalizable,
    UnsupportedFamily,
)

KL = "kl"
CHI2 = "chi2"
TV = "tv"

SUPPORT_ATOL = 1e-12   # mu-mass below this does not trigger AC violations
NULL_ATOL = 1e-300     # nu-mass below this counts as null

_KIND_FINITE = "finite"
_KIND_GRID = "grid"
_KIND_GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class Measure:
    """Probability measure in one of the three native representations."""

    kind: str
    weights: Optional[np.ndarray] = None       # finite / grid: masses, sum 1
    grid: Optional[models.Grid] = None         # grid only
    mean: Optional[np.ndarray] = None          # gaussian
    cov: Optional[np.ndarray] = None           # gaussian

    @property
    def dim(self) -> int:
        if self.kind == _KIND_GAUSSIAN:
            return self.mean.shape[0]
        return self.weights.shape[0]

    def expect(self, f: np.ndarray) -> float:
        """Expectation of a tabulated observable (finite/grid only)."""
        if self.kind == _KIND_GAUSSIAN:
            raise FamilyMismatch("tabulated expectation undefined for Gaussian measures")
        return float(np.dot(self.weights, np.asarray(f, dtype=float)))


def finite_measure(p: np.ndarray) -> Measure:
    p = np.array(p, dtype=float)
    _check_weights(p)
    p.setflags(write=False)
    return Measure(kind=_KIND_FINITE, weights=p)


def grid_measure(masses: np.ndarray, grid: models.Grid) -> Measure:
    m = np.array(masses, dtype=float)
    if m.shape != (grid.n,):
        raise DimensionMismatch("mass vector length must match cell count")
    _check_weights(m)
    m.setflags(write=False)
    return Measure(kind=_KIND_GRID, weights=m, grid=grid)


def gaussian_measure(mean, cov) -> Measure:
    mean = np.atleast_1d(np.array(mean, dtype=float))
    cov = np.array(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov.reshape(1, 1)
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise DimensionMismatch("covariance shape must match mean dimension")
    if np.max(np.abs(cov - cov.T)) > 1e-10:
        raise DimensionMismatch("covariance must be symmetric")
    if np.min(scipy.linalg.eigvalsh(cov)) <= 0.0:
        raise DimensionMismatch("covariance must be positive definite")
    mean.setflags(write=False)
    cov.setflags(write=False)
    return Measure(kind=_KIND_GAUSSIAN, mean=mean, cov=cov)


def _check_weights(w: np.ndarray) -> None:
    if w.ndim != 1:
        raise DimensionMismatch("weights must be a vector")
    if np.any(w < -1e-12):
        raise DimensionMismatch("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-8:
        raise DimensionMismatch(f"weights must sum to 1, got {w.sum()!r}")


def discretize_gaussian(mean: float, var: float, grid: models.Grid) -> Measure:
    """Midpoint-rule discretization of a scalar Gaussian onto grid cells.

    The truncated tail mass is folded back in by renormalizing, so the
    result is a genuine probability vector on the grid.
    """
    x = grid.centers
    dens = np.exp(-0.5 * (x - mean) ** 2 / var) / math.sqrt(2.0 * math.pi * var)
    w = dens * grid.dx
    total = w.sum()
    if total <= 0.0:
        raise NotNormalizable("gaussian has no mass on the grid")
    return grid_measure(w / total, grid)


@dataclass(frozen=True)
class LikelihoodRatio:
    """Radon-Nikodym derivative gamma = d mu / d nu.

    Finite/grid: tabulated values with nu(gamma) = 1and gamma >= 0.
    Gaussian: symbolic, stored as both moment pairs.
    """

    kind: str
    values: Optional[np.ndarray] = None
    nu_weights: Optional[np.ndarray] = None
    mu_moments: Optional[tuple] = None
    nu_moments: Optional[tuple] = None

    def __post_init__(self):
        if self.values is not None:
            if np.any(self.values < 0.0):
                raise FdivlabError("likelihood ratio must be non-negative")
            mass = float(np.dot(self.nu_weights, self.values))
            if abs(mass - 1.0) > 1e-8:
                raise FdivlabError(f"nu(gamma) must be 1, got {mass!r}")


def _same_support_kind(mu: Measure, nu: Measure) -> None:
    if mu.kind != nu.kind:
        raise FamilyMismatch(f"measure kinds differ: {mu.kind} vs {nu.kind}")
    if mu.kind == _KIND_GRID and mu.grid != nu.grid:
        raise FamilyMismatch("grid measures live on different grids")
    if mu.kind != _KIND_GAUSSIAN and mu.weights.shape != nu.weights.shape:
        raise DimensionMismatch("weight vectors differ in length")
    if mu.kind == _KIND_GAUSSIAN and mu.mean.shape != nu.mean.shape:
        raise DimensionMismatch("Gaussian dimensions differ")


def _identical(mu: Measure, nu: Measure) -> bool:
    if mu is nu:
        return True
    if mu.kind != nu.kind:
        return False
    if mu.kind == _KIND_GAUSSIAN:
        return np.array_equal(mu.mean, nu.mean) and np.array_equal(mu.cov, nu.cov)
    return np.array_equal(mu.weights, nu.weights)


def rn_derivative(mu: Measure, nu: Measure) -> LikelihoodRatio:
    """gamma = d mu/d nu; raises AbsoluteContinuityViolated on real mu-mass
    sitting on nu-null cells."""
    _same_support_kind(mu, nu)
    if mu.kind == _KIND_GAUSSIAN:
        return LikelihoodRatio(
            kind=_KIND_GAUSSIAN,
            mu_moments=(mu.mean, mu.cov),
            nu_moments=(nu.mean, nu.cov),
        )
    p, q = mu.weights, nu.weights
    null = q < NULL_ATOL
    if np.any(p[null] > SUPPORT_ATOL):
        raise AbsoluteContinuityViolated("mu has mass where nu vanishes")
    gamma = np.zeros_like(p)
    ok = ~null
    gamma[ok] = p[ok] / q[ok]
    return LikelihoodRatio(kind=mu.kind, values=gamma, nu_weights=q)


# ---------------------------------------------------------------------------
# discrete divergence kernels (shared by scalar and row-wise batched callers)
# ---------------------------------------------------------------------------

def _kl_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Row-wise KL(P_i || Q_i) for stacked weight rows, +inf on AC failure."""
    P = np.atleast_2d(P)
    Q = np.atleast_2d(Q)
    null = Q < NULL_ATOL
    bad = np.any(null & (P > SUPPORT_ATOL), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = P * (np.log(np.where(P > 0.0, P, 1.0)) - np.log(np.where(null, 1.0, Q)))
    terms = np.where((P <= 0.0) | null, 0.0, terms)
    out = terms.sum(axis=1)
    out[bad] = np.inf
    return out


def _chi2_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    P = np.atleast_2d(P)
    Q = np.atleast_2d(Q)
    null = Q < NULL_ATOL
    bad = np.any(null & (P > SUPPORT_ATOL), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (P - Q) ** 2 / Q
    terms = np.where(null, 0.0, terms)
    out = terms.sum(axis=1)
    out[bad] = np.inf
    return out


def _tv_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    P = np.atleast_2d(P)
    Q = np.atleast_2d(Q)
    return 0.5 * np.abs(P - Q).sum(axis=1)


# ---------------------------------------------------------------------------
# Gaussian closed forms
# ---------------------------------------------------------------------------

def _gauss_kl(mu: Measure, nu: Measure) -> float:
    m0, S0 = nu.mean, nu.cov
    m1, S1 = mu.mean, mu.cov
    d = m0.shape[0]
    S0inv = scipy.linalg.inv(S0)
    dm = m1 - m0
    _, ld0 = np.linalg.slogdet(S0)
    _, ld1 = np.linalg.slogdet(S1)
    return 0.5 * (np.trace(S0inv @ S1) - d + dm @ S0inv @ dm + ld0 - ld1)


def _gauss_chi2_mass(mu: Measure, nu: Measure):
    """Return (M, A, b) with M = 1 + chi2(mu|nu) = integral of p_mu^2/p_nu,
    or (inf, None, None) when the defining integral diverges."""
    m1, S1 = mu.mean, mu.cov
    m0, S0 = nu.mean, nu.cov
    S1inv = scipy.linalg.inv(S1)
    S0inv = scipy.linalg.inv(S0)
    A = 2.0 * S1inv - S0inv
    A = 0.5 * (A + A.T)
    if np.min(scipy.linalg.eigvalsh(A)) <= 0.0:
        return np.inf, None, None
    b = 2.0 * S1inv @ m1 - S0inv @ m0
    c0 = 2.0 * m1 @ S1inv @ m1 - m0 @ S0inv @ m0
    _, ldA = np.linalg.slogdet(A)
    _, ld0 = np.linalg.slogdet(S0)
    _, ld1 = np.linalg.slogdet(S1)
    Ainv_b = scipy.linalg.solve(A, b, assume_a="pos")
    logM = 0.5 * ld0 - ld1 - 0.5 * ldA + 0.5 * (b @ Ainv_b - c0)
    return float(np.exp(logM)), A, b


def _gauss_tv(mu: Measure, nu: Measure) -> float:
    d = mu.mean.shape[0]
    if d == 1:
        return _gauss_tv_1d(
            float(mu.mean[0]), float(mu.cov[0, 0]), float(nu.mean[0]), float(nu.cov[0, 0])
        )
    if np.allclose(mu.cov, nu.cov, rtol=1e-12, atol=1e-14):
        Sinv = scipy.linalg.inv(mu.cov)
        dm = mu.mean - nu.mean
        delta = math.sqrt(float(dm @ Sinv @ dm))
        return 2.0 * ndtr(delta / 2.0) - 1.0
    raise UnsupportedFamily(
        "exact Gaussian TV is implemented for d=1 and for equal covariances only"
    )


def _gauss_tv_1d(m1: float, v1: float, m0: float, v0: float) -> float:
    """Exact scalar Gaussian TV via the sign structure of p1 - p0.

    log p1 - log p0 is a quadratic; its real roots split the line into
    intervals of constant sign, and TV is half the summed |CDF differences|.
    """
    a = 0.5 * (1.0 / v0 - 1.0 / v1)
    b = m1 / v1 - m0 / v0
    c = 0.5 * (m0 * m0 / v0 - m1 * m1 / v1) + 0.5 * math.log(v0 / v1)
    if abs(a) < 1e-300:
        if abs(b) < 1e-300:
            return 0.0
        roots = [-c / b]
    else:
        disc = b * b - 4.0 * a * c
        if disc <= 0.0:
            roots = []
        else:
            r = math.sqrt(disc)
            roots = sorted([(-b - r) / (2.0 * a), (-b + r) / (2.0 * a)])
    pts = [-np.inf] + roots + [np.inf]

    def cdf(x, m, v):
        if x == np.inf:
            return 1.0
        if x == -np.inf:
            return 0.0
        return float(ndtr((x - m) / math.sqrt(v)))

    tv = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        d1 = cdf(hi, m1, v1) - cdf(lo, m1, v1)
        d0 = cdf(hi, m0, v0) - cdf(lo, m0, v0)
        tv += abs(d1 - d0)
    return 0.5 * tv


def gaussian_energy(mu: Measure, nu: Measure) -> float:
    """nu(Gamma gamma) for Gaussian mu, nu under Gamma(f) = 2 |grad f|^2.

    Equals 2 * M * E_{N(mu_A, A^{-1})} |D (x - m_mu) + a|^2 where
    M = 1 + chi2(mu|nu); +inf when chi2 diverges.
    """
    M, A, b = _gauss_chi2_mass(mu, nu)
    if not np.isfinite(M):
        return np.inf
    S1inv = scipy.linalg.inv(mu.cov)
    S0inv = scipy.linalg.inv(nu.cov)
    D = S0inv - S1inv
    a_vec = S0inv @ (mu.mean - nu.mean)
    Ainv = scipy.linalg.inv(A)
    mu_A = Ainv @ b
    shift = D @ (mu_A - mu.mean) + a_vec
    return float(2.0 * M * (np.trace(D @ Ainv @ D) + shift @ shift))


# ---------------------------------------------------------------------------
# public divergence API
# ---------------------------------------------------------------------------

def divergence(kind: str, mu: Measure, nu: Measure) -> float:
    """f-divergence of the given kind; KL/chi2 may return +inf, TV is finite."""
    _same_support_kind(mu, nu)
    if _identical(mu, nu):
        return 0.0
    if mu.kind == _KIND_GAUSSIAN:
        if kind == KL:
            return float(_gauss_kl(mu, nu))
        if kind == CHI2:
            M, _, _ = _gauss_chi2_mass(mu, nu)
            return float(M - 1.0) if np.isfinite(M) else np.inf
        if kind == TV:
            return float(_gauss_tv(mu, nu))
        raise FdivlabError(f"unknown divergence kind {kind!r}")
    P, Q = mu.weights[None, :], nu.weights[None, :]
    if kind == KL:
        return float(_kl_rows(P, Q)[0])
    if kind == CHI2:
        return float(_chi2_rows(P, Q)[0])
    if kind == TV:
        return float(_tv_rows(P, Q)[0])
    raise FdivlabError(f"unknown divergence kind {kind!r}")


def fisher_information(mu: Measure, nu: Measure, gen: models.Generator) -> float:
    """Fisher information I(mu|nu) = (1/2) nu(Gamma gamma / gamma).

    Uses the generator's carre du champ; 0/0 = 0 on nu-null cells; returns
    +inf if gamma vanishes on a nu-charged cell where Gamma gamma does not.
    """
    if _identical(mu, nu):
        return 0.0
    if mu.kind == _KIND_GAUSSIAN:
        if gen.family != models.GAUSSIAN:
            raise FamilyMismatch("Gaussian measures need a linear-Gaussian generator")
        S1inv = scipy.linalg.inv(mu.cov)
        S0inv = scipy.linalg.inv(nu.cov)
        D = S0inv - S1inv
        a_vec = S0inv @ (mu.mean - nu.mean)
        return float(np.trace(D @ mu.cov @ D) + a_vec @ a_vec)
    gamma = rn_derivative(mu, nu).values
    if mu.kind == _KIND_FINITE:
        if gen.family != models.FINITE:
            raise FamilyMismatch("finite measures need a finite-state generator")
        cdc = models.carre_du_champ(gen, gamma)
    else:
        # Grid measures accept either the Langevin generator (smooth carre du
        # champ 2 (f')^2) or the equivalent finite jump chain on the cells.
        if gen.family == models.LANGEVIN:
            if mu.grid != gen.grid:
                raise FamilyMismatch("measure grid differs from generator grid")
            cdc = models.carre_du_champ(gen, gamma)
        elif gen.family == models.FINITE and gen.dim == mu.dim:
            cdc = models.carre_du_champ(gen, gamma)
        else:
            raise FamilyMismatch("grid measures need a Langevin or matching jump generator")
    q = nu.weights
    charged = q >= NULL_ATOL
    zero_gamma = charged & (gamma <= 0.0)
    if np.any(zero_gamma & (cdc > 0.0)):
        return np.inf
    ratio = np.zeros_like(gamma)
    ok = charged & (gamma > 0.0)
    ratio[ok] = cdc[ok] / gamma[ok]
    return float(0.5 * np.dot(q, ratio))


def kl_dissipation_rate(mu: Measure, nu: Measure, gen: models.Generator) -> float:
    """Exact decay rate of KL(mu_t | nu_t) when both laws follow the flow.

    For the diffusion families this equals :func:`fisher_information`.  For
    finite jump chains the carre-du-champ ratio form overestimates the true
    rate, which is the chain-rule-free expression nu(A gamma - gamma A log
    gamma); that is what gets computed here (equivalently
    (1/2) nu(Gamma(gamma, log gamma)) with the bilinear carre du champ when
    nu is invariant).
    """
    if gen.family != models.FINITE:
        return fisher_information(mu, nu, gen)
    if mu.kind not in (_KIND_FINITE, _KIND_GRID):
        raise FamilyMismatch("jump-chain dissipation needs weighted measures")
    if _identical(mu, nu):
        return 0.0
    if len(mu.weights) != gen.dim:
        raise DimensionMismatch("measure and generator dimensions differ")
    gamma = rn_derivative(mu, nu).values
    A = gen.rate_matrix
    pos = gamma > 0.0
    if not np.all(pos):
        # mu-mass flowing onto a state where gamma = 0 but nu sits makes the
        # divergence drop at rate log(t): the instantaneous rate is +inf
        influx = mu.weights @ A
        if np.any(influx[~pos & (nu.weights > NULL_ATOL)] > 0.0):
            return np.inf
    log_gamma = np.where(pos, np.log(np.where(pos, gamma, 1.0)), 0.0)
    drift_log = A @ log_gamma
    rate = float(np.dot(nu.weights, A @ gamma - gamma * drift_log))
    return max(rate, 0.0) if abs(rate) < 1e-14 else rate


@dataclass(frozen=True)
class DivergenceReport:
    """Bundle of the four divergences with +inf flags and the sandwich check.

    Validates 2 tv^2 <= kl <= chi2 (up to float slack) at construction.
    """

    kl: float
    chi2: float
    tv: float
    fisher: Optional[float] = None

    def __post_init__(self):
        slack = 1e-9 * (1.0 + abs(self.kl) if np.isfinite(self.kl) else 1.0)
        if np.isfinite(self.kl) and 2.0 * self.tv**2 > self.kl + slack:
            raise FdivlabError(
                f"Pinsker violated: 2 tv^2 = {2*self.tv**2!r} > kl = {self.kl!r}"
            )
        if np.isfinite(self.chi2) and np.isfinite(self.kl) and self.kl > self.chi2 + slack:
            raise FdivlabError(f"kl = {self.kl!r} exceeds chi2 = {self.chi2!r}")
        if not np.isfinite(self.chi2) or self.kl <= self.chi2:
            return

    @property
    def kl_infinite(self) -> bool:
        return not np.isfinite(self.kl)

    @property
    def chi2_infinite(self) -> bool:
        return not np.isfinite(self.chi2)

    @property
    def fisher_infinite(self) -> bool:
        return self.fisher is not None and not np.isfinite(self.fisher)


def divergence_report(
    mu: Measure, nu: Measure, gen: Optional[models.Generator] = None
) -> DivergenceReport:
    """All divergences of mu from nu (Fisher included when gen is given)."""
    fisher = fisher_information(mu, nu, gen) if gen is not None else None
    return DivergenceReport(
        kl=divergence(KL, mu, nu),
        chi2=divergence(CHI2, mu, nu),
        tv=divergence(TV, mu, nu),
        fisher=fisher,
    )
