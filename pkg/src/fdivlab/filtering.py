"""Nonlinear filters for the white-noise observation model.

Wonham filter for finite chains (exact-prediction / Bayes-correction
splitting, which preserves the simplex for every step size and every
observation), Kalman--Bucy moment filter for the linear-Gaussian family,
dual-prior runs sharing one observation record, innovation diagnostics, and
the ensemble verification of the divergence evolution identities.

The splitting step is

    predict:  p <- p exp(A dt)          (exact for the frozen generator)
    correct:  p(x) <- p(x) exp(h(x)^T dz - |h(x)|^2 dt / 2),  renormalize

with the innovation increment dI = dz - p(h) dt recorded at the step start
(Ito convention, matching the simulator's left-endpoint h).
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg

from . import measures, models, simulate
from .errors import (
    CovarianceBlowup,
    DegenerateFilter,
    DimensionMismatch,
    FamilyMismatch,
)
from .kolmogorov import _step_count, grid_jump_generator

_UNDERFLOW_LOG = math.log(1e-300)
_COV_LIMIT = 1e6
_Z_ONE_PERCENT = 2.5758293035489004   # two-sided 1% normal critical value


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class FilterTrajectory:
    """Posterior snapshots on the time grid plus innovation increments."""

    times: np.ndarray
    measures: List[measures.Measure]
    innovations: np.ndarray          # (n, m)
    prior: measures.Measure

    def expectations(self, values) -> np.ndarray:
        """pi_t(f) along the trajectory for a per-state value table."""
        return np.array([m.expect(values) for m in self.measures])


@dataclass
class DualRun:
    """Two filters with different priors driven by one observation record."""

    bundle: simulate.PathBundle
    traj_mu: FilterTrajectory
    traj_nu: FilterTrajectory
    reports: List[measures.DivergenceReport]
    gammas: List[np.ndarray]

    @property
    def times(self) -> np.ndarray:
        return self.traj_mu.times

    @property
    def kl(self) -> np.ndarray:
        return np.array([r.kl for r in self.reports])

    @property
    def chi2(self) -> np.ndarray:
        return np.array([r.chi2 for r in self.reports])

    @property
    def tv(self) -> np.ndarray:
        return np.array([r.tv for r in self.reports])


# ---------------------------------------------------------------------------
# Wonham filter
# ---------------------------------------------------------------------------

def _wonham_tables(gen: models.Generator, h: simulate.ObservationFunction, dt: float):
    if gen.family != models.FINITE:
        raise FamilyMismatch("the Wonham filter needs a finite-state generator")
    if h.kind != "table":
        raise FamilyMismatch("finite-state filtering needs a table observation")
    if h.table.shape[0] != gen.dim:
        raise DimensionMismatch("observation table does not match the state count")
    M = scipy.linalg.expm(gen.rate_matrix * dt)
    half_h2 = 0.5 * np.sum(h.table**2, axis=1) * dt
    return M, h.table, half_h2


def _bayes_rows(P: np.ndarray, expo: np.ndarray) -> np.ndarray:
    """Renormalized P * exp(expo) row-wise with underflow guards."""
    shift = expo.max(axis=1, keepdims=True)
    if np.any(shift < _UNDERFLOW_LOG):
        raise DegenerateFilter("all observation likelihoods underflow")
    w = P * np.exp(expo - shift)
    z = w.sum(axis=1, keepdims=True)
    if np.any(z <= 0.0):
        raise DegenerateFilter("posterior normalizer vanished")
    return w / z


def run_wonham(gen: models.Generator, h: simulate.ObservationFunction,
               prior: measures.Measure, dz: np.ndarray, dt: float) -> FilterTrajectory:
    """Splitting-scheme filter for a finite chain; simplex-safe by design."""
    M, table, half_h2 = _wonham_tables(gen, h, dt)
    dz = np.atleast_2d(np.asarray(dz, dtype=float))
    n = len(dz)
    times = np.arange(n + 1) * dt
    p = prior.weights.copy()
    snaps = [measures.finite_measure(p)]
    innov = np.empty((n, h.m))
    for k in range(n):
        innov[k] = dz[k] - (p @ table) * dt
        p = p @ M
        expo = table @ dz[k] - half_h2
        p = _bayes_rows(p[None, :], expo[None, :])[0]
        snaps.append(measures.finite_measure(p))
    return FilterTrajectory(times=times, measures=snaps, innovations=innov, prior=prior)


# ---------------------------------------------------------------------------
# Kalman-Bucy filter
# ---------------------------------------------------------------------------

def _riccati_rhs(S: np.ndarray, K: np.ndarray, HtH: np.ndarray) -> np.ndarray:
    eye = np.eye(len(S))
    return -K @ S - S @ K + 2.0 * eye - S @ HtH @ S


def run_kalman_bucy(K, H, prior: measures.Measure, dz: np.ndarray,
                    dt: float) -> FilterTrajectory:
    """Moment filter: Euler-Maruyama mean coupling, RK4 Riccati covariance."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Hm = np.atleast_2d(np.asarray(H, dtype=float))
    HtH = Hm.T @ Hm
    dz = np.atleast_2d(np.asarray(dz, dtype=float))
    n = len(dz)
    times = np.arange(n + 1) * dt
    m = np.atleast_1d(np.asarray(prior.mean, dtype=float)).copy()
    S = np.atleast_2d(np.asarray(prior.cov, dtype=float)).copy()
    snaps = [measures.gaussian_measure(m, S)]
    innov = np.empty((n, Hm.shape[0]))
    for k in range(n):
        resid = dz[k] - (Hm @ m) * dt
        innov[k] = resid
        m = m - K @ m * dt + S @ Hm.T @ resid
        k1 = _riccati_rhs(S, K, HtH)
        k2 = _riccati_rhs(S + 0.5 * dt * k1, K, HtH)
        k3 = _riccati_rhs(S + 0.5 * dt * k2, K, HtH)
        k4 = _riccati_rhs(S + dt * k3, K, HtH)
        S = S + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        S = 0.5 * (S + S.T)
        if np.linalg.norm(S) > _COV_LIMIT:
            raise CovarianceBlowup(f"posterior covariance norm exceeds {_COV_LIMIT:g}")
        snaps.append(measures.gaussian_measure(m, S))
    return FilterTrajectory(times=times, measures=snaps, innovations=innov, prior=prior)


def steady_state_covariance(K, H) -> np.ndarray:
    """Stabilizing root of 0 = -K S - S K + 2 I - S H^T H S (CARE form)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Hm = np.atleast_2d(np.asarray(H, dtype=float))
    d = K.shape[0]
    S = scipy.linalg.solve_continuous_are(
        -K, Hm.T, 2.0 * np.eye(d), np.eye(Hm.shape[0]))
    return S


# ---------------------------------------------------------------------------
# dual-prior runs
# ---------------------------------------------------------------------------

def dual_filter_run(gen: models.Generator, h: simulate.ObservationFunction,
                    mu: measures.Measure, nu: measures.Measure,
                    T: float, dt: float, seed: int, trial: int,
                    H=None) -> DualRun:
    """Simulate under the mu-prior, filter under both priors, track divergences."""
    bundle = simulate.sample_bundle(gen, mu, h, T, dt, seed, trial)
    if gen.family == models.FINITE:
        traj_mu = run_wonham(gen, h, mu, bundle.dz, dt)
        traj_nu = run_wonham(gen, h, nu, bundle.dz, dt)
    elif gen.family == models.GAUSSIAN:
        if h.kind != "linear":
            raise FamilyMismatch("gaussian dual runs need a linear observation")
        traj_mu = run_kalman_bucy(gen.stiffness, h.matrix, mu, bundle.dz, dt)
        traj_nu = run_kalman_bucy(gen.stiffness, h.matrix, nu, bundle.dz, dt)
    else:
        raise FamilyMismatch("dual runs cover the finite and gaussian families")
    reports = []
    gammas = []
    for pm, pn in zip(traj_mu.measures, traj_nu.measures):
        reports.append(measures.divergence_report(pm, pn))
        if gen.family == models.FINITE:
            gammas.append(measures.rn_derivative(pm, pn).values)
    return DualRun(bundle=bundle, traj_mu=traj_mu, traj_nu=traj_nu,
                   reports=reports, gammas=gammas)


# ---------------------------------------------------------------------------
# vectorized finite-state ensembles
# ---------------------------------------------------------------------------

def _chunk_ranges(n_trials: int, threads: int):
    size = max(1, -(-n_trials // max(1, threads)))
    return [(a, min(a + size, n_trials)) for a in range(0, n_trials, size)]


def _simulate_block(gen, mu, h, T, dt, seed, first, last):
    """Paths and observations for trials [first, last) as stacked arrays."""
    n = _step_count(T, dt)
    times = np.arange(n + 1) * dt
    count = last - first
    X = np.empty((count, n + 1), dtype=np.int64)
    for j in range(count):
        _, X[j] = simulate.sample_state_path(gen, mu, T, dt, seed, first + j)
    h_path = h.table[X[:, :-1]]                      # (count, n, m)
    dzs = simulate.observation_matrix(h_path, dt, seed, first, count)
    return times, X, dzs


def _dual_wonham_block(gen, h, mu, nu, dzs, dt, snap_idx, want):
    """Run both filters over a stacked dz block, recording snapshot stats.

    want maps names ("kl","chi2","tv","final_chi2",...) to preallocated
    output arrays; this helper fills rows [0:count] of each requested target.
    Returns the per-trial divergence paths actually computed.
    """
    M, table, half_h2 = _wonham_tables(gen, h, dt)
    count, n, m = dzs.shape
    P = np.tile(mu.weights, (count, 1))
    Q = np.tile(nu.weights, (count, 1))
    out = {}
    for name in want:
        out[name] = np.empty((count, len(snap_idx)))
    col = 0
    if 0 in snap_idx:
        _record_rows(out, P, Q, 0)
        col = 1
    for k in range(n):
        dzk = dzs[:, k, :]
        expo = dzk @ table.T - half_h2
        P = _bayes_rows(P @ M, expo)
        Q = _bayes_rows(Q @ M, expo)
        if col < len(snap_idx) and snap_idx[col] == k + 1:
            _record_rows(out, P, Q, col)
            col += 1
    return out


def _record_rows(out, P, Q, col):
    if "kl" in out:
        out["kl"][:, col] = measures._kl_rows(P, Q)
    if "chi2" in out:
        out["chi2"][:, col] = measures._chi2_rows(P, Q)
    if "tv" in out:
        out["tv"][:, col] = measures._tv_rows(P, Q)


@dataclass
class EnsembleCurves:
    """Snapshot-time ensemble means with standard errors.

    ``initial`` keeps the raw per-trial values at the first snapshot so the
    time-0 prior identity can be checked exactly (the float mean over many
    bitwise-identical values is not itself exact).
    """

    times: np.ndarray
    n_trials: int
    mean: dict
    stderr: dict
    initial: dict

    def monotone_within(self, name: str, z: float = 2.0) -> bool:
        """Mean curve non-increasing up to z paired standard errors."""
        m = self.mean[name]
        se = self.stderr[name]
        step_se = np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
        return bool(np.all(np.diff(m) <= z * step_se))


def ensemble_divergence(gen, h, mu, nu, T, dt, seed, n_trials,
                        store_every: int = 1, threads: int = 1) -> EnsembleCurves:
    """Monte Carlo mean divergence curves between dual filters under P^mu."""
    n = _step_count(T, dt)
    snap_idx = list(range(0, n + 1, store_every))
    if snap_idx[-1] != n:
        snap_idx.append(n)
    names = ("kl", "chi2", "tv")
    rows = {name: np.empty((n_trials, len(snap_idx))) for name in names}

    def work(rng_pair):
        first, last = rng_pair
        _, _, dzs = _simulate_block(gen, mu, h, T, dt, seed, first, last)
        block = _dual_wonham_block(gen, h, mu, nu, dzs, dt, snap_idx, names)
        for name in names:
            rows[name][first:last] = block[name]

    ranges = _chunk_ranges(n_trials, threads)
    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, ranges))
    else:
        for r in ranges:
            work(r)

    times = np.asarray(snap_idx, dtype=float) * dt
    mean = {k: v.mean(axis=0) for k, v in rows.items()}
    stderr = {k: v.std(axis=0, ddof=1) / np.sqrt(n_trials) for k, v in rows.items()}
    initial = {k: v[:, 0].copy() for k, v in rows.items()}
    return EnsembleCurves(times=times, n_trials=n_trials, mean=mean,
                          stderr=stderr, initial=initial)


# ---------------------------------------------------------------------------
# divergence-evolution verification (ensemble residuals)
# ---------------------------------------------------------------------------

@dataclass
class SdeCheck:
    """Ensemble residual report for one divergence evolution equation.

    total_z: z-score of E[d_T - d_0 - integral(drift) dt] (should be ~0).
    corrected_rms: RMS residual after subtracting the martingale term
    (discretization-level, shrinks with dt).  alt_total_z: same as total_z
    but with the alternative drift form, kept for adjudication.
    """

    name: str
    total_mean: float
    total_stderr: float
    step_z_max: float
    step_z_frac_over_3: float
    corrected_rms: float
    alt_total_z: Optional[float] = None

    @property
    def total_z(self) -> float:
        if self.total_stderr == 0.0:
            return 0.0
        return self.total_mean / self.total_stderr

    @property
    def passed(self) -> bool:
        return abs(self.total_z) <= 3.0 and self.step_z_frac_over_3 <= 0.01


@dataclass
class SdeReport:
    kl: SdeCheck
    chi2: SdeCheck
    n_trials: int
    dt: float

    @property
    def passed(self) -> bool:
        return self.kl.passed and self.chi2.passed


def verify_divergence_sde(gen, h, mu, nu, T, dt, seed, n_trials,
                          threads: int = 1) -> SdeReport:
    """Test the dual-filter divergence drifts against ensemble increments.

    For KL the leading drift is the jump-chain dissipation rate (the
    carre-du-champ ratio form, reported as the alternative, overstates the
    decay for jump signals); for chi-square the drift is -pi^nu(Gamma gamma)
    minus the product of the two observation covariances.  Martingale terms
    are removed against the mu-innovations for the corrected residuals.
    """
    M, table, half_h2 = _wonham_tables(gen, h, dt)
    A = gen.rate_matrix
    n = _step_count(T, dt)

    res_kl = np.zeros((n_trials, n))      # per-step d increment - drift dt
    res_chi = np.zeros((n_trials, n))
    alt_kl = np.zeros((n_trials, n))      # with the ratio-form drift
    alt_chi = np.zeros((n_trials, n))     # with the flipped Gamma sign
    cor_kl = np.zeros((n_trials, n))      # residual minus martingale part
    cor_chi = np.zeros((n_trials, n))

    def work(rng_pair):
        first, last = rng_pair
        _, _, dzs = _simulate_block(gen, mu, h, T, dt, seed, first, last)
        count = last - first
        P = np.tile(mu.weights, (count, 1))
        Q = np.tile(nu.weights, (count, 1))
        kl_prev = measures._kl_rows(P, Q)
        chi_prev = measures._chi2_rows(P, Q)
        for k in range(n):
            gamma = np.where(Q > 0.0, P / np.where(Q > 0.0, Q, 1.0), 0.0)
            log_gamma = np.where(gamma > 0.0, np.log(np.where(gamma > 0.0, gamma, 1.0)), 0.0)
            pi_mu_h = P @ table
            pi_nu_h = Q @ table
            dh = pi_mu_h - pi_nu_h
            # drifts
            Agam = gamma @ A.T
            Alog = log_gamma @ A.T
            kl_rate = np.einsum("jx,jx->j", Q, Agam - gamma * Alog)
            drift_kl = -kl_rate - 0.5 * np.einsum("ja,ja->j", dh, dh)
            diffs = gamma[:, :, None] - gamma[:, None, :]
            Ggam = np.einsum("xy,jxy->jx", A, diffs**2)
            nu_Ggam = np.einsum("jx,jx->j", Q, Ggam)
            gam_h_mu = np.einsum("jx,jx,xa->ja", P, gamma, table)
            gam_h_nu = np.einsum("jx,jx,xa->ja", Q, gamma, table)
            mu_gam = np.einsum("jx,jx->j", P, gamma)
            nu_gam = np.einsum("jx,jx->j", Q, gamma)
            V_mu = gam_h_mu - mu_gam[:, None] * pi_mu_h
            V_nu = gam_h_nu - nu_gam[:, None] * pi_nu_h
            vprod = np.einsum("ja,ja->j", V_mu, V_nu)
            drift_chi = -nu_Ggam - vprod
            alt_drift_kl = -0.5 * np.einsum(
                "jx,jx->j", Q, np.where(gamma > 0.0, Ggam / np.where(gamma > 0.0, gamma, 1.0), 0.0)
            ) - 0.5 * np.einsum("ja,ja->j", dh, dh)
            alt_drift_chi = nu_Ggam - vprod
            # martingale integrands against dI^mu
            log_h_mu = np.einsum("jx,jx,xa->ja", P, log_gamma, table)
            mu_log = np.einsum("jx,jx->j", P, log_gamma)
            mart_kl = log_h_mu - mu_log[:, None] * pi_mu_h - dh
            mart_chi = gam_h_mu - mu_gam[:, None] * pi_mu_h - mu_gam[:, None] * dh
            dI = dzs[:, k, :] - pi_mu_h * dt
            # advance both filters
            dzk = dzs[:, k, :]
            expo = dzk @ table.T - half_h2
            P = _bayes_rows(P @ M, expo)
            Q = _bayes_rows(Q @ M, expo)
            kl_now = measures._kl_rows(P, Q)
            chi_now = measures._chi2_rows(P, Q)
            r_kl = (kl_now - kl_prev) - drift_kl * dt
            r_chi = (chi_now - chi_prev) - drift_chi * dt
            res_kl[first:last, k] = r_kl
            res_chi[first:last, k] = r_chi
            alt_kl[first:last, k] = (kl_now - kl_prev) - alt_drift_kl * dt
            alt_chi[first:last, k] = (chi_now - chi_prev) - alt_drift_chi * dt
            cor_kl[first:last, k] = r_kl - np.einsum("ja,ja->j", mart_kl, dI)
            cor_chi[first:last, k] = r_chi - np.einsum("ja,ja->j", mart_chi, dI)
            kl_prev, chi_prev = kl_now, chi_now

    ranges = _chunk_ranges(n_trials, threads)
    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, ranges))
    else:
        for r in ranges:
            work(r)

    def finish(name, res, alt, cor):
        totals = res.sum(axis=1)
        t_mean = float(totals.mean())
        t_se = float(totals.std(ddof=1) / np.sqrt(n_trials))
        step_mean = res.mean(axis=0)
        step_se = res.std(axis=0, ddof=1) / np.sqrt(n_trials)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(step_se > 0, step_mean / step_se, 0.0)
        alt_tot = alt.sum(axis=1)
        alt_se = float(alt_tot.std(ddof=1) / np.sqrt(n_trials))
        return SdeCheck(
            name=name,
            total_mean=t_mean,
            total_stderr=t_se,
            step_z_max=float(np.max(np.abs(z))),
            step_z_frac_over_3=float(np.mean(np.abs(z) > 3.0)),
            corrected_rms=float(np.sqrt(np.mean(cor**2))),
            alt_total_z=float(alt_tot.mean() / alt_se) if alt_se > 0 else 0.0,
        )

    return SdeReport(
        kl=finish("kl", res_kl, alt_kl, cor_kl),
        chi2=finish("chi2", res_chi, alt_chi, cor_chi),
        n_trials=n_trials,
        dt=dt,
    )


# ---------------------------------------------------------------------------
# innovation diagnostics
# ---------------------------------------------------------------------------

@dataclass
class InnovationReport:
    """Wiener-increment tests on dI / sqrt(dt) at the 1% level."""

    n: int
    mean_z: np.ndarray            # per component
    var_z: np.ndarray
    lag1_rho: np.ndarray

    @property
    def mean_ok(self) -> bool:
        return bool(np.all(np.abs(self.mean_z) <= _Z_ONE_PERCENT))

    @property
    def var_ok(self) -> bool:
        return bool(np.all(np.abs(self.var_z) <= _Z_ONE_PERCENT))

    @property
    def lag1_ok(self) -> bool:
        return bool(np.all(np.abs(self.lag1_rho) <= 3.0 / np.sqrt(self.n)))

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.var_ok and self.lag1_ok


def innovation_diagnostics(innovations: np.ndarray, dt: float) -> InnovationReport:
    """Zero-mean / unit-variance / no-lag-1-correlation tests, per component."""
    xi = np.asarray(innovations, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    xi = xi / np.sqrt(dt)
    n = xi.shape[0]
    mean_z = xi.mean(axis=0) * np.sqrt(n)
    s2 = (xi**2).mean(axis=0)
    var_z = (s2 - 1.0) * np.sqrt(n / 2.0)
    centered = xi - xi.mean(axis=0)
    num = (centered[1:] * centered[:-1]).sum(axis=0)
    den = (centered**2).sum(axis=0)
    lag1 = np.where(den > 0, num / den, 0.0)
    return InnovationReport(n=n, mean_z=mean_z, var_z=var_z, lag1_rho=lag1)


# ---------------------------------------------------------------------------
# Kalman-Bucy vs grid-filter cross-check
# ---------------------------------------------------------------------------

def kalman_vs_grid_filter(k: float, H: float, prior_mean: float, prior_var: float,
                          grid: models.Grid, T: float, dt: float, seed: int,
                          trial: int = 0) -> dict:
    """Run both filters on one OU observation record; KL between snapshots.

    The benchmark filter is the splitting scheme on the finite-volume jump
    chain for U(x) = k x^2 / 2 with the observation table H * x read at cell
    centers; the Kalman--Bucy posterior is discretized onto the same grid
    for the comparison.
    """
    K = np.array([[float(k)]])
    gau = models.gaussian_generator(K)
    mu0 = measures.gaussian_measure(np.array([prior_mean]), np.array([[prior_var]]))
    h_lin = simulate.obs_linear(H)
    bundle = simulate.sample_bundle(gau, mu0, h_lin, T, dt, seed, trial)

    kb = run_kalman_bucy(K, H, mu0, bundle.dz, dt)

    lan = models.langevin_generator(lambda x: 0.5 * k * x**2,
                                    lambda x: k * x, grid)
    jump = grid_jump_generator(lan)
    h_tab = simulate.obs_table(H * grid.centers)
    prior_grid = measures.discretize_gaussian(prior_mean, prior_var, grid)
    won = run_wonham(jump, h_tab, prior_grid, bundle.dz, dt)

    final_kb = kb.measures[-1]
    kb_grid = measures.discretize_gaussian(
        float(final_kb.mean[0]), float(final_kb.cov[0, 0]), grid)
    kl_gap = measures.divergence(measures.KL, won.measures[-1], kb_grid)
    return {
        "kl_final": float(kl_gap),
        "kb_mean": float(final_kb.mean[0]),
        "kb_var": float(final_kb.cov[0, 0]),
        "grid_mean": float(won.measures[-1].expect(grid.centers)),
    }
