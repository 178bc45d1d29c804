"""Path and observation sampling for the hidden-state model.

State paths: exact jump-chain simulation for finite state spaces (exponential
holding times over the embedded chain, then sampled onto the uniform time
grid), Euler--Maruyama with sqrt(2 dt) noise for the diffusion families.
Observation increments follow the white-noise model

    dZ = h(X_t) dt + dW,   discretized as   dZ_k = h(X_{t_k}) dt + sqrt(dt) eta_k

with h read at the left endpoint (Ito convention, matching the filter's
likelihood discretization).  All randomness is drawn from rng.stream keyed by
(seed, trial, role), so every bundle is a pure function of those integers.
"""

import struct
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import models, rng
from .errors import (
    DimensionMismatch,
    FamilyMismatch,
    FdivlabError,
    IoFailure,
    UnsupportedFamily,
)
from .kolmogorov import Protocol, _step_count

_MAGIC = b"FDLB"
_DUMP_VERSION = 1
_GRAD_EPS = 1e-5       # spatial step for protocols without an explicit gradient


# ---------------------------------------------------------------------------
# observation functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservationFunction:
    """Family-matched map from states to R^m.

    kind "table": per-state rows for finite chains, shape (d, m).
    kind "linear": h(x) = H x for the linear-Gaussian family, H shape (m, dim).
    kind "callable": vectorized scalar-state map for Langevin paths.
    """

    kind: str
    m: int
    table: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None
    func: Optional[Callable] = None

    def at(self, x: np.ndarray) -> np.ndarray:
        """Evaluate h along states; returns shape x.shape[:1] + (m,)."""
        if self.kind == "table":
            return self.table[np.asarray(x, dtype=int)]
        if self.kind == "linear":
            pts = np.atleast_2d(np.asarray(x, dtype=float))
            return pts @ self.matrix.T
        vals = np.asarray(self.func(np.asarray(x, dtype=float)), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return vals


def obs_table(values) -> ObservationFunction:
    """Observation function for a finite chain from a (d,) or (d, m) table."""
    tab = np.asarray(values, dtype=float)
    if tab.ndim == 1:
        tab = tab[:, None]
    if tab.ndim != 2 or tab.shape[1] < 1:
        raise DimensionMismatch("observation table must be (d,) or (d, m)")
    if not np.all(np.isfinite(tab)):
        raise FdivlabError("observation table has non-finite entries")
    return ObservationFunction(kind="table", m=tab.shape[1], table=tab)


def obs_linear(H) -> ObservationFunction:
    """Linear observation h(x) = H x; scalars mean a 1x1 gain."""
    mat = np.atleast_2d(np.asarray(H, dtype=float))
    if not np.all(np.isfinite(mat)):
        raise FdivlabError("observation matrix has non-finite entries")
    return ObservationFunction(kind="linear", m=mat.shape[0], matrix=mat)


def obs_map(func: Callable, m: int = 1) -> ObservationFunction:
    """Observation from a vectorized callable on scalar states."""
    if m < 1:
        raise DimensionMismatch("observation dimension must be >= 1")
    return ObservationFunction(kind="callable", m=int(m), func=func)


# ---------------------------------------------------------------------------
# path bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathBundle:
    """One trial's state path and observation increments on a uniform grid."""

    times: np.ndarray       # (n+1,)
    states: np.ndarray      # (n+1,) ints / floats, or (n+1, dim) for gaussian
    dz: np.ndarray          # (n, m)
    dt: float
    family: str
    seed: int
    trial: int

    def __post_init__(self):
        if len(self.dz) != len(self.times) - 1:
            raise DimensionMismatch("need exactly one observation increment per step")
        if not np.all(np.isfinite(self.dz)):
            raise FdivlabError("observation increments must be finite")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


def _draw_initial(mu0, rs: np.random.Generator):
    """One sample from the prior, family-inferred from the measure kind."""
    if mu0.kind == "finite":
        return int(rs.choice(len(mu0.weights), p=mu0.weights))
    if mu0.kind == "grid":
        cell = int(rs.choice(len(mu0.weights), p=mu0.weights))
        x = mu0.grid.centers[cell] + mu0.grid.dx * (rs.random() - 0.5)
        return float(x)
    mean = np.atleast_1d(mu0.mean)
    cov = np.atleast_2d(mu0.cov)
    z = rs.standard_normal(len(mean))
    return mean + np.linalg.cholesky(cov) @ z


def _sample_jump_path(A: np.ndarray, x0: int, times: np.ndarray,
                      rs: np.random.Generator) -> np.ndarray:
    """Exact continuous-time chain: holding times + embedded jumps."""
    T = times[-1]
    d = A.shape[0]
    jump_times = [0.0]
    jump_states = [x0]
    t, x = 0.0, x0
    while True:
        rate = -A[x, x]
        if rate <= 0.0:
            break                       # absorbing state
        t += rs.exponential(1.0 / rate)
        if t >= T:
            break
        probs = np.maximum(A[x], 0.0)
        probs[x] = 0.0
        x = int(rs.choice(d, p=probs / probs.sum()))
        jump_times.append(t)
        jump_states.append(x)
    seq = np.asarray(jump_states, dtype=np.int64)
    idx = np.searchsorted(np.asarray(jump_times), times, side="right") - 1
    return seq[idx]


def sample_state_path(gen, mu0, T: float, dt: float, seed: int, trial: int):
    """Sample one hidden path on the uniform grid; deterministic in (seed, trial).

    gen may be a Generator or a Protocol (time-varying drift for the
    diffusion families).  Finite chains are simulated exactly; diffusions use
    Euler--Maruyama X <- X - grad U dt + sqrt(2 dt) xi.
    """
    if dt <= 0.0:
        raise FdivlabError("dt must be positive")
    n = _step_count(T, dt)
    times = np.arange(n + 1) * dt
    rs_init = rng.stream(seed, trial, rng.ROLE_INIT)
    rs_state = rng.stream(seed, trial, rng.ROLE_STATE)
    is_protocol = isinstance(gen, Protocol)
    family = gen.family

    if family == models.FINITE:
        if is_protocol:
            raise UnsupportedFamily("time-varying rate matrices are not simulated")
        x0 = _draw_initial(mu0, rs_init)
        return times, _sample_jump_path(gen.rate_matrix, x0, times, rs_state)

    if family == models.LANGEVIN:
        drift = _langevin_drift(gen, is_protocol)
        x = float(_draw_initial(mu0, rs_init))
        path = np.empty(n + 1)
        path[0] = x
        noise = rs_state.standard_normal(n) * np.sqrt(2.0 * dt)
        for k in range(n):
            x = x - drift(times[k], x) * dt + noise[k]
            path[k + 1] = x
        return times, path

    if family == models.GAUSSIAN:
        x = np.atleast_1d(np.asarray(_draw_initial(mu0, rs_init), dtype=float))
        dim = len(x)
        path = np.empty((n + 1, dim))
        path[0] = x
        noise = rs_state.standard_normal((n, dim)) * np.sqrt(2.0 * dt)
        for k in range(n):
            if is_protocol:
                K = gen.stiffness(times[k])
                c = gen.center(times[k])
            else:
                K, c = gen.stiffness, np.zeros(dim)
            x = x - K @ (x - c) * dt + noise[k]
            path[k + 1] = x
        return times, path

    raise UnsupportedFamily(f"cannot sample paths for family {family!r}")


def _langevin_drift(gen, is_protocol: bool) -> Callable:
    if not is_protocol:
        grad = gen.grad_potential
        return lambda t, x: float(grad(np.asarray([x]))[0])
    if gen.grad_potential is not None:
        return lambda t, x: float(np.asarray(gen.grad_potential(t, np.asarray([x])))[0])

    def fd_grad(t, x):
        pts = np.asarray([x - _GRAD_EPS, x + _GRAD_EPS])
        lo, hi = np.asarray(gen.potential(t, pts), dtype=float)
        return (hi - lo) / (2.0 * _GRAD_EPS)

    return fd_grad


def sample_observation(times: np.ndarray, states: np.ndarray,
                       h: ObservationFunction, dt: float,
                       seed: int, trial: int) -> np.ndarray:
    """White-noise observation increments along a path (left-endpoint h)."""
    n = len(times) - 1
    hvals = h.at(states[:-1])
    rs = rng.stream(seed, trial, rng.ROLE_OBS)
    eta = rs.standard_normal((n, h.m))
    return hvals * dt + np.sqrt(dt) * eta


def sample_bundle(gen, mu0, h: ObservationFunction, T: float, dt: float,
                  seed: int, trial: int) -> PathBundle:
    """State path plus observations in one call."""
    times, states = sample_state_path(gen, mu0, T, dt, seed, trial)
    dz = sample_observation(times, states, h, dt, seed, trial)
    family = gen.family
    return PathBundle(times=times, states=states, dz=dz, dt=dt,
                      family=family, seed=seed, trial=trial)


# ---------------------------------------------------------------------------
# binary dump (replay debugging)
# ---------------------------------------------------------------------------

_FAMILY_CODES = {models.FINITE: 0, models.LANGEVIN: 1, models.GAUSSIAN: 2}
_HEADER = struct.Struct("<4sIQQdBBHII")      # magic, version, seed, trial, dt,
                                             # family, state dtype, m, n+1, dim


def dump_bundle(bundle: PathBundle, path: str) -> None:
    """Fixed little-endian layout: header, state array, dz array."""
    states = np.asarray(bundle.states)
    int_states = states.dtype.kind in "iu"
    dim = states.shape[1] if states.ndim == 2 else 1
    header = _HEADER.pack(
        _MAGIC, _DUMP_VERSION, bundle.seed & 0xFFFFFFFFFFFFFFFF,
        bundle.trial, bundle.dt,
        _FAMILY_CODES[bundle.family], 0 if int_states else 1,
        bundle.dz.shape[1], len(bundle.times), dim,
    )
    body_states = states.astype("<i8" if int_states else "<f8").tobytes()
    body_dz = np.asarray(bundle.dz).astype("<f8").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(body_states)
            fh.write(body_dz)
    except OSError as exc:
        raise IoFailure(f"cannot write path bundle: {exc}") from exc


def load_bundle(path: str) -> PathBundle:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read path bundle: {exc}") from exc
    if len(raw) < _HEADER.size or raw[:4] != _MAGIC:
        raise IoFailure("not a path-bundle file")
    (_, version, seed, trial, dt, fam_code, state_code, m, n_times, dim) = \
        _HEADER.unpack(raw[:_HEADER.size])
    if version != _DUMP_VERSION:
        raise IoFailure(f"unsupported path-bundle version {version}")
    family = {v: k for k, v in _FAMILY_CODES.items()}[fam_code]
    state_dtype = "<i8" if state_code == 0 else "<f8"
    off = _HEADER.size
    count = n_times * (dim if family == models.GAUSSIAN else 1)
    states = np.frombuffer(raw, dtype=state_dtype, count=count, offset=off).copy()
    if family == models.GAUSSIAN:
        states = states.reshape(n_times, dim)
    off += count * 8
    dz = np.frombuffer(raw, dtype="<f8", count=(n_times - 1) * m, offset=off)
    dz = dz.reshape(n_times - 1, m).copy()
    times = np.arange(n_times) * dt
    return PathBundle(times=times, states=states, dz=dz, dt=dt,
                      family=family, seed=seed, trial=trial)


# ---------------------------------------------------------------------------
# ensemble helpers (vectorization across trials)
# ---------------------------------------------------------------------------

def observation_matrix(h_path: np.ndarray, dt: float, seed: int,
                       first_trial: int, n_trials: int) -> np.ndarray:
    """Stacked dz for trials [first, first+n) given per-trial h(X) paths.

    h_path has shape (n_trials, n, m); each trial's noise comes from its own
    stream, so rows match what sample_observation would produce one by one.
    """
    n = h_path.shape[1]
    m = h_path.shape[2]
    out = np.empty((n_trials, n, m))
    root = np.sqrt(dt)
    for j in range(n_trials):
        rs = rng.stream(seed, first_trial + j, rng.ROLE_OBS)
        out[j] = h_path[j] * dt + root * rs.standard_normal((n, m))
    return out


def gaussian_path_matrix(gen, mu0, T: float, dt: float, seed: int,
                         first_trial: int, n_trials: int) -> np.ndarray:
    """Stacked linear-Gaussian paths, shape (n_trials, n+1, dim).

    Row j is bit-identical to sample_state_path(gen, mu0, T, dt, seed,
    first_trial + j): the per-trial streams are consumed in the same order,
    only the Euler recursion runs across all trials at once.
    """
    n = _step_count(T, dt)
    times = np.arange(n + 1) * dt
    is_protocol = isinstance(gen, Protocol)
    dim = (np.atleast_2d(gen.stiffness(0.0)).shape[0] if is_protocol
           else gen.dim)
    x = np.empty((n_trials, dim))
    noise = np.empty((n_trials, n, dim))
    scale = np.sqrt(2.0 * dt)
    for j in range(n_trials):
        trial = first_trial + j
        x[j] = np.atleast_1d(np.asarray(
            _draw_initial(mu0, rng.stream(seed, trial, rng.ROLE_INIT)), dtype=float))
        noise[j] = rng.stream(seed, trial, rng.ROLE_STATE).standard_normal((n, dim))
    noise *= scale
    paths = np.empty((n_trials, n + 1, dim))
    paths[:, 0] = x
    for k in range(n):
        if is_protocol:
            K = gen.stiffness(times[k])
            c = gen.center(times[k])
        else:
            K, c = gen.stiffness, np.zeros(dim)
        x = x - (x - c) @ K.T * dt + noise[:, k]
        paths[:, k + 1] = x
    return paths
