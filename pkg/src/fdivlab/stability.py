"""Filter-stability analysis through the backward map.

The backward map sends the terminal filter likelihood ratio gamma_T to
y0(x) = E^nu[gamma_T(X_T) | X_0 = x], itself a likelihood ratio.  Its mean
gap mu(y0) - nu(y0) equals the expected terminal chi-square divergence
between the dual filters, its variance contracts under the conditional
Poincare inequality, and it solves a linear BSDE whose time-0 value this
module recovers by least-squares Monte Carlo regression.

All Monte Carlo estimators here are driven by the same per-trial stream
contract as the simulators; disjoint trial-index blocks keep the paired
estimators (dual-filter ensembles vs backward-map ensembles) independent.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg

from . import measures, models, rng, simulate
from .errors import (
    AbsoluteContinuityViolated,
    DegenerateMeasure,
    FamilyMismatch,
    IllConditionedRegression,
    ZeroEssInf,
)
from .filtering import _bayes_rows, _chunk_ranges, _simulate_block, _wonham_tables
from .kolmogorov import _dirichlet_matrix_finite, _smallest_rayleigh, _step_count

_GRAM_COND_LIMIT = 1e12
_STD_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# conditional Poincare constants
# ---------------------------------------------------------------------------

def conditional_poincare_constant(gen: models.Generator,
                                  pi: measures.Measure) -> float:
    """Rayleigh minimum of pi(Gamma f) / Var_pi(f) for one conditional law."""
    if gen.family != models.FINITE:
        raise FamilyMismatch("conditional constants are defined for finite chains")
    w = pi.weights
    if np.any(w <= 0.0):
        raise DegenerateMeasure("conditional measure has a zero entry")
    E = _dirichlet_matrix_finite(gen.rate_matrix, w)
    return _smallest_rayleigh(E, w)


def _simplex_grid(d: int, resolution: int):
    """Interior barycentric points k/resolution with all parts >= 1."""
    for cuts in combinations(range(1, resolution), d - 1):
        parts = np.diff((0,) + cuts + (resolution,))
        yield parts / resolution


def conditional_poincare_infimum(gen: models.Generator,
                                 resolution: int = 100) -> float:
    """Infimum of the conditional constant over the probability simplex.

    Two states admit a closed form: with rates a = A(0,1), b = A(1,0), the
    per-measure ratio (p a + (1-p) b)/(p(1-p)) is minimized at
    p = sqrt(b)/(sqrt(a)+sqrt(b)) with value (sqrt(a)+sqrt(b))^2.  Larger
    state spaces fall back to a deterministic barycentric scan.
    """
    if gen.family != models.FINITE:
        raise FamilyMismatch("conditional constants are defined for finite chains")
    A = gen.rate_matrix
    d = gen.dim
    if d == 2:
        a, b = A[0, 1], A[1, 0]
        return float((np.sqrt(a) + np.sqrt(b)) ** 2)
    best = np.inf
    for point in _simplex_grid(d, resolution):
        pi = measures.finite_measure(point)
        best = min(best, conditional_poincare_constant(gen, pi))
    return float(best)


# ---------------------------------------------------------------------------
# backward-map Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class BackwardMapEntry:
    """y0 at one initial state, plus the spread of gamma_T around 1.

    sq_dev is the conditional mean of |gamma_T(X_T) - 1|^2 given X_0 = x0,
    so nu-averaging the entries recovers var^nu(gamma_T(X_T)) without the
    catastrophic cancellation of a second-moment-minus-one estimator.
    """

    x0: int
    value: float
    stderr: float
    sq_dev: float
    sq_dev_stderr: float
    n_trials: int


@dataclass
class BackwardMapEstimate:
    """Estimated y0 over all states with per-state standard errors."""

    values: np.ndarray
    stderrs: np.ndarray
    sq_devs: np.ndarray
    sq_dev_stderrs: np.ndarray
    horizon: float
    n_trials: int
    mu: measures.Measure
    nu: measures.Measure

    def nu_mean(self) -> float:
        return float(np.dot(self.nu.weights, self.values))

    def nu_mean_stderr(self) -> float:
        return float(np.sqrt(np.dot(self.nu.weights**2, self.stderrs**2)))

    def mean_gap(self) -> float:
        """mu(y0) - nu(y0), the backward-map estimate of E^mu[chi^2_T]."""
        return float(np.dot(self.mu.weights - self.nu.weights, self.values))

    def mean_gap_stderr(self) -> float:
        w = self.mu.weights - self.nu.weights
        return float(np.sqrt(np.dot(w**2, self.stderrs**2)))

    def var_y0(self) -> float:
        """var^nu(y0(X_0)) = E^nu |y0(X_0) - 1|^2 from the estimated table."""
        return float(np.dot(self.nu.weights, (self.values - 1.0) ** 2))

    def var_gamma_terminal(self) -> float:
        """var^nu(gamma_T(X_T)) = E^nu |gamma_T(X_T) - 1|^2."""
        return float(np.dot(self.nu.weights, self.sq_devs))


def _require_dominated(mu: measures.Measure, nu: measures.Measure) -> None:
    if np.any((mu.weights > 0.0) & (nu.weights <= 0.0)):
        raise AbsoluteContinuityViolated("mu charges a state outside nu's support")


def _terminal_gamma_samples(gen, h, mu, nu, x0, T, dt, seed, first_trial,
                            n_trials):
    """gamma_T(X_T) samples for paths started at x0 under the nu-model."""
    point = np.zeros(gen.dim)
    point[x0] = 1.0
    prior_path = measures.finite_measure(point)
    _, X, dzs = _simulate_block(gen, prior_path, h, T, dt, seed,
                                first_trial, first_trial + n_trials)
    M, table, half_h2 = _wonham_tables(gen, h, dt)
    P = np.tile(mu.weights, (n_trials, 1))
    Q = np.tile(nu.weights, (n_trials, 1))
    n = dzs.shape[1]
    for k in range(n):
        expo = dzs[:, k, :] @ table.T - half_h2
        P = _bayes_rows(P @ M, expo)
        Q = _bayes_rows(Q @ M, expo)
    x_T = X[:, -1]
    rows = np.arange(n_trials)
    p_T = P[rows, x_T]
    q_T = Q[rows, x_T]
    return np.where(q_T > 0.0, p_T / np.where(q_T > 0.0, q_T, 1.0), 0.0)


def backward_map_mc(gen, h, mu, nu, x0: int, T: float, dt: float,
                    n_trials: int, seed: int,
                    first_trial: Optional[int] = None) -> BackwardMapEntry:
    """Monte Carlo estimate of y0(x0) = E^nu[gamma_T(X_T) | X_0 = x0]."""
    _require_dominated(mu, nu)
    if T == 0.0:
        gamma0 = measures.rn_derivative(mu, nu).values
        return BackwardMapEntry(x0=x0, value=float(gamma0[x0]), stderr=0.0,
                                sq_dev=float((gamma0[x0] - 1.0) ** 2),
                                sq_dev_stderr=0.0, n_trials=n_trials)
    if first_trial is None:
        first_trial = (x0 + 1) * n_trials
    g = _terminal_gamma_samples(gen, h, mu, nu, x0, T, dt, seed,
                                first_trial, n_trials)
    dev = (g - 1.0) ** 2
    root = np.sqrt(n_trials)
    return BackwardMapEntry(
        x0=x0,
        value=float(g.mean()),
        stderr=float(g.std(ddof=1) / root),
        sq_dev=float(dev.mean()),
        sq_dev_stderr=float(dev.std(ddof=1) / root),
        n_trials=n_trials,
    )


def backward_map_table(gen, h, mu, nu, T, dt, n_trials, seed) -> BackwardMapEstimate:
    """y0 over every initial state, each from its own trial block."""
    d = gen.dim
    entries = [backward_map_mc(gen, h, mu, nu, x, T, dt, n_trials, seed)
               for x in range(d)]
    return BackwardMapEstimate(
        values=np.array([e.value for e in entries]),
        stderrs=np.array([e.stderr for e in entries]),
        sq_devs=np.array([e.sq_dev for e in entries]),
        sq_dev_stderrs=np.array([e.sq_dev_stderr for e in entries]),
        horizon=T,
        n_trials=n_trials,
        mu=mu,
        nu=nu,
    )


# ---------------------------------------------------------------------------
# the chi-square identity and its bounds
# ---------------------------------------------------------------------------

@dataclass
class IdentityReport:
    """Two-estimator comparison of E^mu[chi^2(pi_T^mu | pi_T^nu)].

    lhs: direct dual-filter ensemble under the mu-model.  rhs: mu(y0) -
    nu(y0) from the backward map under the nu-model.  Also carries the
    normalization, Jensen, and Cauchy-Schwarz checks.
    """

    horizon: float
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    nu_y0: float
    nu_y0_stderr: float
    var_y0: float
    var_gamma: float
    var_gamma_stderr: float
    chi2_priors: float
    table: Optional[BackwardMapEstimate] = None

    @property
    def estimators_overlap(self) -> bool:
        gap = abs(self.lhs - self.rhs)
        return gap <= 3.0 * (self.lhs_stderr + self.rhs_stderr)

    @property
    def normalized(self) -> bool:
        return abs(self.nu_y0 - 1.0) <= 3.0 * self.nu_y0_stderr

    @property
    def jensen_ok(self) -> bool:
        slack = 2.0 * self.var_gamma_stderr
        return self.var_y0 <= self.var_gamma + slack

    @property
    def cauchy_schwarz_ok(self) -> bool:
        lhs_sq = self.lhs**2
        bound = self.var_y0 * self.chi2_priors
        slack = 3.0 * (2.0 * abs(self.lhs) * self.lhs_stderr)
        return lhs_sq <= bound + slack

    @property
    def passed(self) -> bool:
        return (self.estimators_overlap and self.normalized
                and self.jensen_ok and self.cauchy_schwarz_ok)


def _terminal_chi2_under_mu(gen, h, mu, nu, T, dt, seed, n_trials, threads=1):
    """Per-trial chi^2(pi_T^mu | pi_T^nu) with paths simulated under mu."""
    if T == 0.0:
        return np.full(n_trials, measures.divergence(measures.CHI2, mu, nu))
    M, table, half_h2 = _wonham_tables(gen, h, dt)
    n = _step_count(T, dt)
    out = np.empty(n_trials)

    def work(rng_pair):
        first, last = rng_pair
        _, _, dzs = _simulate_block(gen, mu, h, T, dt, seed, first, last)
        count = last - first
        P = np.tile(mu.weights, (count, 1))
        Q = np.tile(nu.weights, (count, 1))
        for k in range(n):
            expo = dzs[:, k, :] @ table.T - half_h2
            P = _bayes_rows(P @ M, expo)
            Q = _bayes_rows(Q @ M, expo)
        out[first:last] = measures._chi2_rows(P, Q)

    ranges = _chunk_ranges(n_trials, threads)
    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, ranges))
    else:
        for r in ranges:
            work(r)
    return out


def chi2_identity_check(gen, h, mu, nu, T, dt, n_trials, seed,
                        threads: int = 1) -> IdentityReport:
    """Both sides of E^mu[chi^2_T] = mu(y0) - nu(y0), with the bound chain."""
    lhs_samples = _terminal_chi2_under_mu(gen, h, mu, nu, T, dt, seed,
                                          n_trials, threads)
    table = backward_map_table(gen, h, mu, nu, T, dt, n_trials, seed)
    var_g = table.var_gamma_terminal()
    var_g_se = float(np.sqrt(np.dot(table.nu.weights**2,
                                    table.sq_dev_stderrs**2)))
    return IdentityReport(
        horizon=T,
        lhs=float(lhs_samples.mean()),
        lhs_stderr=float(lhs_samples.std(ddof=1) / np.sqrt(n_trials)),
        rhs=table.mean_gap(),
        rhs_stderr=table.mean_gap_stderr(),
        nu_y0=table.nu_mean(),
        nu_y0_stderr=table.nu_mean_stderr(),
        var_y0=table.var_y0(),
        var_gamma=var_g,
        var_gamma_stderr=var_g_se,
        chi2_priors=measures.divergence(measures.CHI2, mu, nu),
        table=table,
    )


# ---------------------------------------------------------------------------
# the exponential stability bound
# ---------------------------------------------------------------------------

@dataclass
class BoundRow:
    horizon: float
    lhs: float
    lhs_stderr: float
    rhs: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs


@dataclass
class BoundReport:
    rows: List[BoundRow]
    a_low: float
    c_pi: float
    chi2_prior: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def filter_chi2_bound_check(gen, h, mu, T_list: Sequence[float], dt, n_trials,
                            seed, threads: int = 1) -> BoundReport:
    """E^mu[chi^2(pi_T^mu | pi_T^mubar)] <= (1/a) e^{-cT} chi^2(mu|mubar) + 3 se.

    The reference prior is the invariant measure; a is the exact essential
    infimum of d mu / d mubar (finite state: plain minimum over charged
    states) and c the conditional-Poincare infimum over the simplex.
    """
    mu_bar = models.invariant_measure(gen)
    charged = mu_bar.weights > 0.0
    ratios = mu.weights[charged] / mu_bar.weights[charged]
    a_low = float(ratios.min())
    if a_low <= 0.0:
        raise ZeroEssInf("prior is not bounded below relative to the invariant measure")
    c = conditional_poincare_infimum(gen)
    chi0 = measures.divergence(measures.CHI2, mu, mu_bar)

    T_max = max(T_list)
    n_max = _step_count(T_max, dt)
    snap = sorted({0 if T == 0.0 else _step_count(T, dt) for T in T_list})
    M, table, half_h2 = _wonham_tables(gen, h, dt)
    rows_store = np.empty((n_trials, len(snap)))

    def work(rng_pair):
        first, last = rng_pair
        _, _, dzs = _simulate_block(gen, mu, h, T_max, dt, seed, first, last)
        count = last - first
        P = np.tile(mu.weights, (count, 1))
        Q = np.tile(mu_bar.weights, (count, 1))
        col = 0
        if snap[0] == 0:
            rows_store[first:last, 0] = measures._chi2_rows(P, Q)
            col = 1
        for k in range(n_max):
            expo = dzs[:, k, :] @ table.T - half_h2
            P = _bayes_rows(P @ M, expo)
            Q = _bayes_rows(Q @ M, expo)
            if col < len(snap) and snap[col] == k + 1:
                rows_store[first:last, col] = measures._chi2_rows(P, Q)
                col += 1

    ranges = _chunk_ranges(n_trials, threads)
    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, ranges))
    else:
        for r in ranges:
            work(r)

    rows = []
    for j, k in enumerate(snap):
        T = k * dt
        vals = rows_store[:, j]
        se = float(vals.std(ddof=1) / np.sqrt(n_trials))
        rhs = (1.0 / a_low) * np.exp(-c * T) * chi0 + 3.0 * se
        rows.append(BoundRow(horizon=T, lhs=float(vals.mean()),
                             lhs_stderr=se, rhs=float(rhs)))
    return BoundReport(rows=rows, a_low=a_low, c_pi=c, chi2_prior=chi0)


# ---------------------------------------------------------------------------
# BSDE by least-squares Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class BSDESolution:
    """Regression representation of (Y, V) on the time grid.

    y/v hold per-step per-path values evaluated on the training ensemble:
    y has shape (n+1, trials, d), v (n, trials, d, m).  y0 is the time-0
    value (deterministic up to regression noise), with its ensemble spread.
    """

    times: np.ndarray
    y0: np.ndarray
    y0_stderr: np.ndarray
    martingale_mean: np.ndarray      # E[Y_t(X_t)] per grid time
    martingale_stderr: np.ndarray
    y_paths: np.ndarray
    v_paths: np.ndarray
    terminal_gamma: np.ndarray       # (trials, d)
    ensemble: dict                   # forward data reused by the energy check


def _poly_features(cols: np.ndarray, degree: int) -> np.ndarray:
    """1 + monomials of the columns up to the given total degree."""
    n, k = cols.shape
    feats = [np.ones(n)]
    if degree >= 1:
        for i in range(k):
            feats.append(cols[:, i])
    if degree >= 2:
        for i in range(k):
            for j in range(i, k):
                feats.append(cols[:, i] * cols[:, j])
    if degree >= 3:
        for i in range(k):
            for j in range(i, k):
                for l in range(j, k):
                    feats.append(cols[:, i] * cols[:, j] * cols[:, l])
    return np.column_stack(feats)


def _standardized_design(F: np.ndarray):
    """Intercept plus centered/scaled columns, pruned to a stable basis.

    Constant columns collapse into the intercept.  Nearly dependent columns
    (the dual filters merge over time, so late-step features of pi^mu and
    pi^nu become collinear) are removed by rank-revealing pivoted QR before
    the Gram condition check, which then only fires on a basis that is
    genuinely unusable rather than merely redundant.
    """
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    keep = std > _STD_FLOOR
    keep[0] = False                       # intercept handled separately
    G = (F[:, keep] - mean[keep]) / std[keep]
    if G.shape[1] > 0:
        _, R, piv = scipy.linalg.qr(G, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > 1e-7 * diag[0])) if diag.size else 0
        G = G[:, np.sort(piv[:rank])]
    design = np.column_stack([np.ones(len(F)), G])
    gram = design.T @ design
    cond = np.linalg.cond(gram)
    if cond > _GRAM_COND_LIMIT:
        raise IllConditionedRegression(
            f"feature Gram matrix condition number {cond:.3e}")
    return design


def _regress(design: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least-squares fitted values for one or many target columns."""
    coef, _, _, _ = np.linalg.lstsq(design, targets, rcond=None)
    return design @ coef


def _backward_sweep(P_all, Q_all, dzs, A, table, dt, basis_degree):
    """One least-squares backward recursion over a forward ensemble block."""
    n, count, d = P_all.shape[0] - 1, P_all.shape[1], P_all.shape[2]
    m = dzs.shape[2]
    gamma_T = np.where(Q_all[-1] > 0.0,
                       P_all[-1] / np.where(Q_all[-1] > 0.0, Q_all[-1], 1.0),
                       0.0)
    y_paths = np.empty((n + 1, count, d))
    v_paths = np.zeros((n, count, d, m))
    y_paths[-1] = gamma_T
    Y_next = gamma_T
    for k in range(n - 1, -1, -1):
        cols = np.concatenate([P_all[k][:, : d - 1], Q_all[k][:, : d - 1]],
                              axis=1)
        design = _standardized_design(_poly_features(cols, basis_degree))
        cond_mean = _regress(design, Y_next)                  # (count, d)
        resid = Y_next - cond_mean
        pi_nu_h = Q_all[k] @ table                            # (count, m)
        v_k = np.empty((count, d, m))
        for a in range(m):
            v_k[:, :, a] = _regress(design, resid * (dzs[:, k, a] / dt)[:, None])
        gen_term = cond_mean @ A.T
        hv = np.einsum("xa,jxa->jx", table, v_k)
        pivh = np.einsum("jxa,ja->jx", v_k, pi_nu_h)
        Y_now = cond_mean + (gen_term + hv - pivh) * dt
        y_paths[k] = Y_now
        v_paths[k] = v_k
        Y_next = Y_now
    return y_paths, v_paths, gamma_T


_Y0_BATCHES = 8


def solve_bsde_regression(gen, h, mu, nu, T, dt, ensemble_size, basis_degree,
                          seed) -> BSDESolution:
    """Backward least-squares Monte Carlo for the dual-filter BSDE.

    Forward pass: an ensemble of dual filters under the nu-model.  Backward
    pass, per head state x: the conditional mean of Y_{t+dt}(x) given the
    filter pair is fitted on polynomial features of (pi_t^mu, pi_t^nu); the
    martingale component V_t(x) comes from regressing residual * dz / dt;
    the generator and h^T V drift terms then step Y back.  The reported
    standard error of Y_0 is the spread of independent sub-batch re-solves
    (the across-path spread of fitted values says nothing about the
    regression's own sampling error).
    """
    d = gen.dim
    A = gen.rate_matrix
    M, table, half_h2 = _wonham_tables(gen, h, dt)
    n = 0 if T == 0.0 else _step_count(T, dt)
    times = np.arange(n + 1) * dt

    if n == 0:
        X = np.empty((ensemble_size, 1), dtype=np.int64)
        for j in range(ensemble_size):
            X[j, 0] = simulate._draw_initial(nu, rng.stream(seed, j, rng.ROLE_INIT))
        dzs = np.zeros((ensemble_size, 0, h.m))
    else:
        _, X, dzs = _simulate_block(gen, nu, h, T, dt, seed, 0, ensemble_size)
    P_all = np.empty((n + 1, ensemble_size, d))
    Q_all = np.empty((n + 1, ensemble_size, d))
    P = np.tile(mu.weights, (ensemble_size, 1))
    Q = np.tile(nu.weights, (ensemble_size, 1))
    P_all[0], Q_all[0] = P, Q
    for k in range(n):
        expo = dzs[:, k, :] @ table.T - half_h2
        P = _bayes_rows(P @ M, expo)
        Q = _bayes_rows(Q @ M, expo)
        P_all[k + 1], Q_all[k + 1] = P, Q

    y_paths, v_paths, gamma_T = _backward_sweep(P_all, Q_all, dzs, A, table,
                                                dt, basis_degree)

    if n == 0:
        y0_stderr = np.zeros(d)
    else:
        batch_y0 = []
        for first, last in _chunk_ranges(ensemble_size, _Y0_BATCHES):
            if last - first < 2:
                continue
            yb, _, _ = _backward_sweep(P_all[:, first:last], Q_all[:, first:last],
                                       dzs[first:last], A, table, dt,
                                       basis_degree)
            batch_y0.append(yb[0].mean(axis=0))
        batch_y0 = np.array(batch_y0)
        y0_stderr = batch_y0.std(axis=0, ddof=1) / np.sqrt(len(batch_y0))

    rows = np.arange(ensemble_size)
    mart = np.empty((n + 1, ensemble_size))
    for k in range(n + 1):
        mart[k] = y_paths[k][rows, X[:, k]]
    root = np.sqrt(ensemble_size)
    return BSDESolution(
        times=times,
        y0=y_paths[0].mean(axis=0),
        y0_stderr=y0_stderr,
        martingale_mean=mart.mean(axis=1),
        martingale_stderr=mart.std(axis=1, ddof=1) / root,
        y_paths=y_paths,
        v_paths=v_paths,
        terminal_gamma=gamma_T,
        ensemble={"X": X, "Q": Q_all, "dzs": dzs, "dt": dt, "A": A},
    )


@dataclass
class EnergyReport:
    """Terms of the variance-balance identity for the BSDE solution."""

    var_y0: float
    var_gamma: float
    energy_integral: float
    residual: float
    weak_form_ok: bool


def energy_identity_check(solution: BSDESolution) -> EnergyReport:
    """var(Y0) + int E[pi^nu(Gamma Y) + pi^nu(|V|^2)] dt = var(gamma_T)."""
    X = solution.ensemble["X"]
    Q_all = solution.ensemble["Q"]
    dt = solution.ensemble["dt"]
    A = solution.ensemble["A"]
    rows = np.arange(X.shape[0])

    y0_at_x0 = solution.y_paths[0][rows, X[:, 0]]
    var_y0 = float(np.mean((y0_at_x0 - 1.0) ** 2))
    gT_at_xT = solution.terminal_gamma[rows, X[:, -1]]
    var_gamma = float(np.mean((gT_at_xT - 1.0) ** 2))

    n = len(solution.times) - 1
    energy = 0.0
    for k in range(n):
        Y = solution.y_paths[k]
        diffs = Y[:, :, None] - Y[:, None, :]
        Gy = np.einsum("xy,jxy->jx", A, diffs**2)
        nu_Gy = np.einsum("jx,jx->j", Q_all[k], Gy)
        v2 = np.einsum("jxa,jxa->jx", solution.v_paths[k], solution.v_paths[k])
        nu_v2 = np.einsum("jx,jx->j", Q_all[k], v2)
        energy += float(np.mean(nu_Gy + nu_v2)) * dt

    residual = var_y0 + energy - var_gamma
    return EnergyReport(
        var_y0=var_y0,
        var_gamma=var_gamma,
        energy_integral=energy,
        residual=residual,
        weak_form_ok=var_y0 <= var_gamma,
    )
