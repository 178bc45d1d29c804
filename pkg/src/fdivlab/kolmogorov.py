"""Forward Kolmogorov flows and divergence dissipation along them.

Implements the three forward solvers (exact exponential stepping for jump
chains, an exponential-fitting finite-volume scheme for scalar Langevin
densities, RK4 moment equations for linear-Gaussian laws), the divergence
flow with its dissipation residuals, Poincare constants, log-linear decay
fits, and the deterministic second-law ledger.

The finite-volume flux uses the Bernoulli weight B(x) = x/(e^x - 1) on
potential differences, which makes the discrete Boltzmann vector exactly
stationary and keeps all off-grid-diagonal rates non-negative, so the
discrete system is itself a Markov jump chain.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.linalg

from . import measures, models
from .errors import (
    DimensionMismatch,
    FamilyMismatch,
    FdivlabError,
    NonPositiveSeries,
    NotNormalizable,
    StepTooLarge,
    ZeroDensityCell,
)


# ---------------------------------------------------------------------------
# protocols (time-dependent generators)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Protocol:
    """Deterministic time-dependent driving.

    LANGEVIN: potential(t, x) and dpotential_dt(t, x), vectorized in x,
    with densities on ``grid``.  GAUSSIAN: stiffness_path(t) -> K_t (sym.
    pos. def.) and center_path(t) -> c_t; the implied potential is
    U_t(x) = (1/2) (x - c_t)^T K_t (x - c_t).
    """

    family: str
    potential: Optional[Callable] = None
    dpotential_dt: Optional[Callable] = None
    grid: Optional[models.Grid] = None
    stiffness_path: Optional[Callable] = None
    center_path: Optional[Callable] = None
    grad_potential: Optional[Callable] = None  # (t, x) -> U_t'(x), for path sampling

    def stiffness(self, t: float) -> np.ndarray:
        K = np.atleast_2d(np.asarray(self.stiffness_path(t), dtype=float))
        if np.min(scipy.linalg.eigvalsh(K)) <= 0.0:
            raise FdivlabError(f"protocol stiffness not positive definite at t={t}")
        return K

    def center(self, t: float) -> np.ndarray:
        if self.center_path is None:
            K = np.atleast_2d(np.asarray(self.stiffness_path(t), dtype=float))
            return np.zeros(K.shape[0])
        return np.atleast_1d(np.asarray(self.center_path(t), dtype=float))


# ---------------------------------------------------------------------------
# finite-volume operator for Langevin densities
# ---------------------------------------------------------------------------

def _bernoulli_weight(x: np.ndarray) -> np.ndarray:
    """B(x) = x / (e^x - 1), the exponential-fitting flux weight; B(0) = 1."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    with np.errstate(over="ignore"):
        out = np.where(small, 1.0 - 0.5 * x, safe / np.expm1(safe))
    return out


def fokker_planck_operator(u_values: np.ndarray, grid: models.Grid) -> np.ndarray:
    """Mass-vector generator L (dm/dt = L m) with zero-flux boundaries.

    Columns sum to zero (exact mass conservation) and off-diagonal entries
    are non-negative; exp(-u_values) is exactly stationary.
    """
    u = np.asarray(u_values, dtype=float)
    n = grid.n
    if u.shape != (n,):
        raise DimensionMismatch("potential values must match the grid")
    inv_dx2 = 1.0 / grid.dx**2
    delta = np.diff(u)                     # interface potential jumps
    up = _bernoulli_weight(delta) * inv_dx2     # rate i -> i+1
    dn = _bernoulli_weight(-delta) * inv_dx2    # rate i+1 -> i
    L = np.zeros((n, n))
    idx = np.arange(n - 1)
    L[idx + 1, idx] += up          # inflow to i+1 from i
    L[idx, idx] -= up              # outflow from i
    L[idx, idx + 1] += dn          # inflow to i from i+1
    L[idx + 1, idx + 1] -= dn      # outflow from i+1
    return L


def grid_jump_generator(gen: models.Generator) -> models.Generator:
    """The finite-state jump chain equivalent to the discretized diffusion.

    The finite-volume mass operator L acts on densities; its transpose is a
    bona fide rate matrix (rows sum to zero, off-diagonal >= 0) generating
    the jump process whose forward equation is the scheme itself.
    """
    if gen.family != models.LANGEVIN:
        raise FamilyMismatch("grid_jump_generator needs a Langevin generator")
    L = fokker_planck_operator(gen.potential_values, gen.grid)
    return models.finite_generator(L.T)


def _check_euler_step(L: np.ndarray, dt: float) -> None:
    max_outflow = float(np.max(-np.diag(L)))
    if dt * max_outflow > 1.0:
        raise StepTooLarge(
            f"explicit step dt={dt} violates positivity "
            f"(needs dt <= {1.0 / max_outflow:.3e})"
        )


# ---------------------------------------------------------------------------
# forward evolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasureFlow:
    """Snapshots of a forward flow on a uniform time grid."""

    times: np.ndarray
    measures: List[measures.Measure]
    generator: Optional[models.Generator]
    dt: float
    mass_drift: float = 0.0


def _step_count(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise DimensionMismatch(f"dt={dt} must divide the horizon T={T}")
    return n


class _ForwardStepper:
    """Single-measure stepping engine shared by all flow drivers."""

    def __init__(self, gen, mu0, dt, protocol=None):
        self.dt = dt
        self.protocol = protocol
        self.gen = gen
        family = protocol.family if protocol is not None else gen.family
        self.family = family
        if family == models.FINITE:
            if protocol is not None:
                raise FamilyMismatch("protocols are not defined for finite chains")
            self.transition = scipy.linalg.expm(gen.rate_matrix * dt)
            self.p = np.array(mu0.weights, dtype=float)
        elif family == models.LANGEVIN:
            self.grid = protocol.grid if protocol is not None else gen.grid
            if mu0.grid != self.grid:
                raise FamilyMismatch("initial measure grid mismatch")
            if protocol is None:
                self.L = fokker_planck_operator(gen.potential_values, self.grid)
                _check_euler_step(self.L, dt)
            self.p = np.array(mu0.weights, dtype=float)
        elif family == models.GAUSSIAN:
            self.m = np.array(mu0.mean, dtype=float)
            self.S = np.array(mu0.cov, dtype=float)
            if protocol is None:
                self.K = gen.stiffness
        else:
            raise FamilyMismatch(f"unknown family {family!r}")

    def measure(self) -> measures.Measure:
        if self.family == models.FINITE:
            return measures.finite_measure(self.p)
        if self.family == models.LANGEVIN:
            return measures.grid_measure(self.p, self.grid)
        return measures.gaussian_measure(self.m, self.S)

    def mass(self) -> float:
        if self.family == models.GAUSSIAN:
            return 1.0
        return float(self.p.sum())

    def step(self, t: float) -> None:
        dt = self.dt
        if self.family == models.FINITE:
            self.p = self.p @ self.transition
        elif self.family == models.LANGEVIN:
            if self.protocol is not None:
                u = np.asarray(self.protocol.potential(t, self.grid.centers), dtype=float)
                L = fokker_planck_operator(u, self.grid)
                _check_euler_step(L, dt)
            else:
                L = self.L
            self.p = self.p + dt * (L @ self.p)
        else:
            if self.protocol is not None:
                self._gauss_rk4_protocol(t)
            else:
                self._gauss_rk4(self.K, np.zeros(self.m.shape[0]))

    def _gauss_rk4(self, K, c):
        dt = self.dt
        eye = np.eye(K.shape[0])

        def rhs(m, S):
            return -K @ (m - c), -(K @ S) - (S @ K) + 2.0 * eye

        m, S = self.m, self.S
        k1m, k1S = rhs(m, S)
        k2m, k2S = rhs(m + 0.5 * dt * k1m, S + 0.5 * dt * k1S)
        k3m, k3S = rhs(m + 0.5 * dt * k2m, S + 0.5 * dt * k2S)
        k4m, k4S = rhs(m + dt * k3m, S + dt * k3S)
        self.m = m + dt / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m)
        S = S + dt / 6.0 * (k1S + 2 * k2S + 2 * k3S + k4S)
        self.S = 0.5 * (S + S.T)

    def _gauss_rk4_protocol(self, t):
        dt = self.dt
        proto = self.protocol
        eye = np.eye(self.m.shape[0])

        def rhs(tt, m, S):
            K = proto.stiffness(tt)
            c = proto.center(tt)
            return -K @ (m - c), -(K @ S) - (S @ K) + 2.0 * eye

        m, S = self.m, self.S
        k1m, k1S = rhs(t, m, S)
        k2m, k2S = rhs(t + 0.5 * dt, m + 0.5 * dt * k1m, S + 0.5 * dt * k1S)
        k3m, k3S = rhs(t + 0.5 * dt, m + 0.5 * dt * k2m, S + 0.5 * dt * k2S)
        k4m, k4S = rhs(t + dt, m + dt * k3m, S + dt * k3S)
        self.m = m + dt / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m)
        S = S + dt / 6.0 * (k1S + 2 * k2S + 2 * k3S + k4S)
        self.S = 0.5 * (S + S.T)


def evolve_forward(
    gen: Optional[models.Generator],
    mu0: measures.Measure,
    T: float,
    dt: float,
    store_every: int = 1,
    protocol: Optional[Protocol] = None,
) -> MeasureFlow:
    """Forward Kolmogorov flow from mu0 over [0, T] with step dt.

    Snapshots are stored every ``store_every`` steps (t = 0 and t = T always
    included).  Raises StepTooLarge when the explicit Langevin step would
    break positivity, and records total mass drift over the horizon.
    """
    n = _step_count(T, dt)
    stepper = _ForwardStepper(gen, mu0, dt, protocol)
    times = [0.0]
    snaps = [stepper.measure()]
    mass0 = stepper.mass()
    drift = 0.0
    for k in range(n):
        stepper.step(k * dt)
        drift = max(drift, abs(stepper.mass() - mass0))
        if (k + 1) % store_every == 0 or k == n - 1:
            times.append((k + 1) * dt)
            snaps.append(stepper.measure())
    return MeasureFlow(
        times=np.array(times), measures=snaps, generator=gen, dt=dt, mass_drift=drift
    )


# ---------------------------------------------------------------------------
# divergence flow (dissipation identities along two evolving laws)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DivergenceFlowResult:
    """Per-step divergences of mu_t from nu_t and dissipation residuals.

    ``fisher`` is the KL dissipation rate I(mu_t | nu_t); ``energy`` is the
    chi-square dissipation rate nu_t(Gamma gamma_t).  Residuals are centered
    differences |Delta div / Delta t + rate| at interior time points (NaN at
    the two endpoints).
    """

    times: np.ndarray
    kl: np.ndarray
    chi2: np.ndarray
    tv: np.ndarray
    fisher: np.ndarray
    energy: np.ndarray
    residual_kl: np.ndarray
    residual_chi2: np.ndarray
    mass_drift: float

    @property
    def max_residual_kl(self) -> float:
        return float(np.nanmax(self.residual_kl))

    @property
    def max_residual_chi2(self) -> float:
        return float(np.nanmax(self.residual_chi2))


def _energy_rate(gen: models.Generator, mu: measures.Measure, nu: measures.Measure) -> float:
    """nu(Gamma gamma), the chi-square dissipation rate."""
    if mu.kind == "gaussian":
        return measures.gaussian_energy(mu, nu)
    gamma = measures.rn_derivative(mu, nu).values
    cdc = models.carre_du_champ(gen, gamma)
    return float(np.dot(nu.weights, cdc))


def divergence_flow(
    gen: models.Generator,
    mu0: measures.Measure,
    nu0: measures.Measure,
    T: float,
    dt: float,
) -> DivergenceFlowResult:
    """Evolve mu and nu under the same generator; track divergences + rates.

    For grid (Langevin) flows the dissipation rates use the carre du champ of
    the discrete jump chain actually being evolved, so the identities
    d KL/dt = -I and d chi2/dt = -nu(Gamma gamma) hold at the discrete level
    and the centered-difference residuals vanish at second order in dt.
    """
    n = _step_count(T, dt)
    a = _ForwardStepper(gen, mu0, dt)
    b = _ForwardStepper(gen, nu0, dt)
    # For grid flows the rates use the carre du champ of the jump chain that
    # the scheme actually evolves, so the identities close at the discrete level.
    rate_gen = grid_jump_generator(gen) if gen.family == models.LANGEVIN else gen

    def rates(mu, nu):
        return (
            measures.kl_dissipation_rate(mu, nu, rate_gen),
            _energy_rate(rate_gen, mu, nu),
        )

    kl = np.empty(n + 1)
    chi2 = np.empty(n + 1)
    tv = np.empty(n + 1)
    fisher = np.empty(n + 1)
    energy = np.empty(n + 1)
    mass0 = a.mass()
    drift = 0.0
    for k in range(n + 1):
        mu_k, nu_k = a.measure(), b.measure()
        kl[k] = measures.divergence(measures.KL, mu_k, nu_k)
        chi2[k] = measures.divergence(measures.CHI2, mu_k, nu_k)
        tv[k] = measures.divergence(measures.TV, mu_k, nu_k)
        fisher[k], energy[k] = rates(mu_k, nu_k)
        if k < n:
            a.step(k * dt)
            b.step(k * dt)
            drift = max(drift, abs(a.mass() - mass0), abs(b.mass() - mass0))
    times = np.arange(n + 1) * dt
    res_kl = np.full(n + 1, np.nan)
    res_chi2 = np.full(n + 1, np.nan)
    inner = slice(1, n)
    res_kl[inner] = np.abs((kl[2:] - kl[:-2]) / (2.0 * dt) + fisher[inner])
    res_chi2[inner] = np.abs((chi2[2:] - chi2[:-2]) / (2.0 * dt) + energy[inner])
    return DivergenceFlowResult(
        times=times,
        kl=kl,
        chi2=chi2,
        tv=tv,
        fisher=fisher,
        energy=energy,
        residual_kl=res_kl,
        residual_chi2=res_chi2,
        mass_drift=drift,
    )


def residual_order(
    gen: models.Generator,
    mu0: measures.Measure,
    nu0: measures.Measure,
    T: float,
    dt_list: Sequence[float],
) -> dict:
    """Observed convergence order of the dissipation residuals in dt.

    Runs the divergence flow at each step size and fits log(max residual)
    against log(dt).  Returns orders and the residual tables.
    """
    dts = sorted(dt_list, reverse=True)
    rk, rc = [], []
    for dt in dts:
        res = divergence_flow(gen, mu0, nu0, T, dt)
        rk.append(res.max_residual_kl)
        rc.append(res.max_residual_chi2)
    logd = np.log(dts)

    def fit(vals):
        v = np.asarray(vals)
        if np.any(v <= 0.0):
            return float("inf")  # residual hit float noise: better than any order
        slope, _ = np.polyfit(logd, np.log(v), 1)
        return float(slope)

    return {
        "dt": list(dts),
        "residual_kl": rk,
        "residual_chi2": rc,
        "order_kl": fit(rk),
        "order_chi2": fit(rc),
    }


# ---------------------------------------------------------------------------
# Poincare constants and decay fits
# ---------------------------------------------------------------------------

def _dirichlet_matrix_finite(A: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """E with f^T E f = sum_{x,y} pi(x) A(x,y) (f(x) - f(y))^2."""
    W = pi[:, None] * A
    np.fill_diagonal(W, 0.0)
    E = np.diag(W.sum(axis=1) + W.sum(axis=0)) - W - W.T
    return E


def _smallest_rayleigh(E: np.ndarray, pi: np.ndarray) -> float:
    """min over f not constant of (f^T E f) / Var_pi(f).

    Solved in the L2(pi)-weighted coordinates g = diag(sqrt(pi)) f, where the
    variance form is the identity on the orthogonal complement of sqrt(pi);
    the raw (E, V) pencil is numerically singular when pi has tiny entries.
    """
    s = np.sqrt(pi)
    Et = E / np.outer(s, s)
    Et = 0.5 * (Et + Et.T)
    B = scipy.linalg.null_space(s[None, :])
    vals = scipy.linalg.eigh(B.T @ Et @ B, eigvals_only=True)
    return float(vals[0])


def poincare_constant(
    gen: models.Generator,
    mu_bar: Optional[measures.Measure] = None,
) -> float:
    """Best constant c with c * Var(f) <= E(f) over the reference measure.

    FINITE: smallest eigenvalue of the Dirichlet form against the variance
    form on the complement of constants.  LANGEVIN: same Rayleigh problem for
    the finite-volume jump chain (whose staggered energy has no spurious
    checkerboard null mode, unlike centered differences).  GAUSSIAN: analytic
    2 lambda_min(K).  mu_bar defaults to the invariant measure.
    """
    if gen.family == models.GAUSSIAN:
        return float(2.0 * np.min(scipy.linalg.eigvalsh(gen.stiffness)))
    if gen.family == models.LANGEVIN:
        if mu_bar is None:
            mu_bar = models.invariant_measure(gen)  # discrete Boltzmann
        gen = grid_jump_generator(gen)
    if mu_bar is None:
        mu_bar = models.invariant_measure(gen)
    E = _dirichlet_matrix_finite(gen.rate_matrix, mu_bar.weights)
    return _smallest_rayleigh(E, mu_bar.weights)


def decay_rate_fit(times: np.ndarray, series: np.ndarray) -> float:
    """Least-squares slope of log(series) over the last half of the horizon."""
    times = np.asarray(times, dtype=float)
    series = np.asarray(series, dtype=float)
    if times.shape != series.shape:
        raise DimensionMismatch("times and series must have equal length")
    t_mid = times[0] + 0.5 * (times[-1] - times[0])
    window = times >= t_mid - 1e-12
    if np.any(series[window] <= 0.0):
        raise NonPositiveSeries("log-linear fit needs positive series values")
    slope, _ = np.polyfit(times[window], np.log(series[window]), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# entropy, free energy, second law
# ---------------------------------------------------------------------------

def entropy(mu: measures.Measure) -> float:
    """Differential entropy (grid: piecewise-constant density; Gaussian exact)."""
    if mu.kind == "gaussian":
        d = mu.dim
        _, ld = np.linalg.slogdet(mu.cov)
        return 0.5 * (d * math.log(2.0 * math.pi * math.e) + ld)
    if mu.kind == "grid":
        m = mu.weights
        pos = m > 0.0
        return float(-np.sum(m[pos] * np.log(m[pos] / mu.grid.dx)))
    raise FamilyMismatch("entropy is defined for grid and Gaussian measures")


def free_energy(mu: measures.Measure, u_values: np.ndarray) -> float:
    """F(mu, U) = mu(U) - S(mu) for a grid measure and tabulated potential."""
    if mu.kind != "grid":
        raise FamilyMismatch("tabulated free energy needs a grid measure")
    return float(np.dot(mu.weights, u_values)) - entropy(mu)


def gaussian_free_energy(mu: measures.Measure, K: np.ndarray, c: np.ndarray) -> float:
    """F for a Gaussian law in the quadratic potential (1/2)(x-c)^T K (x-c)."""
    K = np.atleast_2d(K)
    c = np.atleast_1d(c)
    dm = mu.mean - c
    mean_u = 0.5 * (np.trace(K @ mu.cov) + dm @ K @ dm)
    return float(mean_u - entropy(mu))


@dataclass(frozen=True)
class SecondLawReport:
    """Work, free-energy change, integrated dissipation, and their residual.

    Validates W - dF >= -tolerance at construction.
    """

    work: float
    delta_f: float
    info_integral: float
    residual: float
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.work - self.delta_f < -self.tolerance:
            raise FdivlabError(
                f"second law violated: W - dF = {self.work - self.delta_f!r}"
            )


def second_law_run(
    protocol: Protocol,
    mu0: measures.Measure,
    T: float,
    dt: float,
    tolerance: float = 1e-8,
) -> SecondLawReport:
    """Drive mu0 with a deterministic protocol and close the energy ledger.

    W is the trapezoid integral of mu_t(dU_t/dt); the dissipation integral
    uses the Fisher information to the instantaneous Boltzmann measure; the
    residual is |(W - dF) - integral I dt|.
    """
    n = _step_count(T, dt)
    if protocol.family == models.LANGEVIN:
        return _second_law_langevin(protocol, mu0, T, dt, n, tolerance)
    if protocol.family == models.GAUSSIAN:
        return _second_law_gaussian(protocol, mu0, T, dt, n, tolerance)
    raise FamilyMismatch("second_law_run supports Langevin and Gaussian protocols")


def _second_law_langevin(protocol, mu0, T, dt, n, tolerance):
    grid = protocol.grid
    x = grid.centers
    stepper = _ForwardStepper(None, mu0, dt, protocol)

    def boltzmann(u):
        w = np.exp(-(u - np.min(u)))
        total = w.sum()
        if not np.isfinite(total) or total <= 0.0:
            raise NotNormalizable("instantaneous Boltzmann weight has no mass")
        return measures.grid_measure(w / total, grid)

    static = True  # rebuild the jump generator only when the potential moves
    u_prev = None
    jump = None
    w_rate = np.empty(n + 1)
    info = np.empty(n + 1)
    for k in range(n + 1):
        t = k * dt
        mu_k = stepper.measure()
        u_k = np.asarray(protocol.potential(t, x), dtype=float)
        du_k = np.asarray(protocol.dpotential_dt(t, x), dtype=float)
        if jump is None or (u_prev is not None and not np.array_equal(u_k, u_prev)):
            jump = models.finite_generator(fokker_planck_operator(u_k, grid).T)
        u_prev = u_k
        w_rate[k] = float(np.dot(mu_k.weights, du_k))
        info[k] = measures.kl_dissipation_rate(mu_k, boltzmann(u_k), jump)
        if k == 0:
            f0 = free_energy(mu_k, u_k)
        if k == n:
            fT = free_energy(mu_k, u_k)
        if k < n:
            stepper.step(t)
    work = float(np.trapezoid(w_rate, dx=dt))
    info_int = float(np.trapezoid(info, dx=dt))
    dF = fT - f0
    return SecondLawReport(
        work=work,
        delta_f=dF,
        info_integral=info_int,
        residual=abs((work - dF) - info_int),
        tolerance=tolerance,
    )


def _second_law_gaussian(protocol, mu0, T, dt, n, tolerance):
    stepper = _ForwardStepper(None, mu0, dt, protocol)
    w_rate = np.empty(n + 1)
    info = np.empty(n + 1)
    for k in range(n + 1):
        t = k * dt
        mu_k = stepper.measure()
        K = protocol.stiffness(t)
        c = protocol.center(t)
        eps = 1e-6
        Kdot = (protocol.stiffness(t + eps) - protocol.stiffness(t - eps)) / (2 * eps) if 0 < t < T else _one_sided_kdot(protocol, t, T, eps)
        cdot = (protocol.center(t + eps) - protocol.center(t - eps)) / (2 * eps) if 0 < t < T else _one_sided_cdot(protocol, t, T, eps)
        dm = mu_k.mean - c
        w_rate[k] = float(
            0.5 * (np.trace(Kdot @ mu_k.cov) + dm @ Kdot @ dm) - dm @ K @ cdot
        )
        boltz = measures.gaussian_measure(c, scipy.linalg.inv(K))
        ggen = models.gaussian_generator(K)
        info[k] = measures.fisher_information(mu_k, boltz, ggen)
        if k == 0:
            f0 = gaussian_free_energy(mu_k, K, c)
        if k == n:
            fT = gaussian_free_energy(mu_k, K, c)
        if k < n:
            stepper.step(t)
    work = float(np.trapezoid(w_rate, dx=dt))
    info_int = float(np.trapezoid(info, dx=dt))
    dF = fT - f0
    return SecondLawReport(
        work=work,
        delta_f=dF,
        info_integral=info_int,
        residual=abs((work - dF) - info_int),
        tolerance=tolerance,
    )


def _one_sided_kdot(protocol, t, T, eps):
    if t <= 0:
        return (protocol.stiffness(t + eps) - protocol.stiffness(t)) / eps
    return (protocol.stiffness(t) - protocol.stiffness(t - eps)) / eps


def _one_sided_cdot(protocol, t, T, eps):
    if t <= 0:
        return (protocol.center(t + eps) - protocol.center(t)) / eps
    return (protocol.center(t) - protocol.center(t - eps)) / eps


def dissipation_velocity(mu: measures.Measure, u_values: np.ndarray):
    """Local dissipative velocity v = -U' - (log density)' on charged cells.

    Returns (v, info_estimate) where v has NaN on cells below the null
    threshold and info_estimate = mu(|v|^2) over the charged block.  Raises
    ZeroDensityCell if the charged cells do not form one contiguous block of
    at least three cells (the finite-difference stencil needs neighbors).
    """
    if mu.kind != "grid":
        raise FamilyMismatch("dissipation velocity needs a grid measure")
    grid = mu.grid
    m = mu.weights
    charged = np.flatnonzero(m >= measures.NULL_ATOL)
    if charged.size < 3:
        raise ZeroDensityCell("fewer than three charged cells")
    i0, i1 = charged[0], charged[-1]
    if not np.all(m[i0 : i1 + 1] >= measures.NULL_ATOL):
        raise ZeroDensityCell("charged cells are not contiguous")
    block = slice(i0, i1 + 1)
    log_density = np.log(m[block] / grid.dx)
    dlog = models.grad_on_grid(log_density, grid.dx)
    du = models.grad_on_grid(np.asarray(u_values, dtype=float)[block], grid.dx)
    v = np.full(grid.n, np.nan)
    v[block] = -du - dlog
    info = float(np.dot(m[block], v[block] ** 2))
    return v, info
