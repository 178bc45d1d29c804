"""Information-thermodynamics ledgers for the scalar feedback trap."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from fdivlab import kolmogorov, measures, models, thermo
from fdivlab.errors import FamilyMismatch, FdivlabError, NotNormalizable

STANDARD = measures.gaussian_measure(0.0, 1.0)


def _ledger_tuple(led):
    return (led.work, led.delta_f, led.dissipation, led.information,
            led.corrected_residual)


# ---------------------------------------------------------------------------
# exact baselines
# ---------------------------------------------------------------------------

def test_equilibrium_ledger_is_exactly_zero():
    # Boltzmann prior, frozen unit trap, silent observations: nothing moves
    led = thermo.thermo_run(thermo.OpenLoopPolicy(lambda t: 1.0), 0.0,
                            STANDARD, T=1.0, dt=1e-3, seed=5)
    assert led.work == 0.0
    assert led.delta_f == 0.0
    assert led.dissipation == 0.0
    assert led.information == 0.0


def test_ledger_rejects_negative_entries():
    with pytest.raises(FdivlabError):
        thermo.ThermoLedger(trial=0, work=0.0, delta_f=0.0, dissipation=-0.1,
                            information=0.0, horizon=1.0, dt=1e-3)
    with pytest.raises(FdivlabError):
        thermo.ThermoLedger(trial=0, work=0.0, delta_f=0.0, dissipation=0.0,
                            information=-1e-9, horizon=1.0, dt=1e-3)


def test_fluctuation_definition():
    led = thermo.ThermoLedger(trial=0, work=2.0, delta_f=0.5, dissipation=1.0,
                              information=0.25, horizon=1.0, dt=1e-3)
    assert led.fluctuation == pytest.approx(2.0 - 0.5 - 1.0 + 0.25)


def test_silent_observations_reduce_to_deterministic_ledger():
    # H = 0: the conditional ledger must match the forward-flow energy ledger
    kfn = lambda t: 1.0 + 0.5 * math.sin(t)
    mu0 = measures.gaussian_measure(1.0, 1.0)
    led = thermo.thermo_run(thermo.OpenLoopPolicy(kfn), 0.0, mu0,
                            T=2.0, dt=1e-3, seed=5)
    proto = kolmogorov.Protocol(
        family=models.GAUSSIAN,
        stiffness_path=lambda t: np.array([[kfn(t)]]),
        center_path=lambda t: np.array([0.0]),
    )
    rep = kolmogorov.second_law_run(proto, mu0, T=2.0, dt=1e-3)
    assert led.information == 0.0
    assert led.work == pytest.approx(rep.work, abs=2e-3)
    assert led.delta_f == pytest.approx(rep.delta_f, abs=2e-3)
    assert led.dissipation == pytest.approx(rep.info_integral, abs=2e-3)


# ---------------------------------------------------------------------------
# determinism and threading
# ---------------------------------------------------------------------------

def test_ensemble_thread_count_invariance():
    kw = dict(H=1.0, mu0=STANDARD, T=1.0, dt=1e-3, seed=23, n_trials=30)
    one = thermo.thermo_ensemble(lambda: thermo.TrackingDemon(1.0, 4.0),
                                 threads=1, **kw)
    three = thermo.thermo_ensemble(lambda: thermo.TrackingDemon(1.0, 4.0),
                                   threads=3, **kw)
    assert [_ledger_tuple(a) for a in one] == [_ledger_tuple(b) for b in three]


def test_single_trial_matches_ensemble_row():
    ledgers = thermo.thermo_ensemble(lambda: thermo.TrackingDemon(1.0, 4.0),
                                     1.0, STANDARD, T=1.0, dt=1e-3, seed=23,
                                     n_trials=10)
    solo = thermo.thermo_run(thermo.TrackingDemon(1.0, 4.0), 1.0, STANDARD,
                             T=1.0, dt=1e-3, seed=23, trial=7)
    assert _ledger_tuple(solo) == _ledger_tuple(ledgers[7])
    assert solo.trial == 7


# ---------------------------------------------------------------------------
# the information-modified second law
# ---------------------------------------------------------------------------

def test_open_loop_identity_z_score():
    policy = lambda: thermo.OpenLoopPolicy(lambda t: 1.0 + 0.5 * math.sin(t))
    mu0 = measures.gaussian_measure(1.0, 1.0)
    ledgers = thermo.thermo_ensemble(policy, 1.0, mu0, T=1.5, dt=1e-3,
                                     seed=29, n_trials=300, threads=2)
    rep = thermo.verify_information_second_law(ledgers)
    assert abs(rep.z_score) <= 3.0
    assert rep.passed
    assert rep.information_bound_ok
    assert rep.n_trials == 300


def test_second_law_report_needs_two_trials():
    led = thermo.thermo_run(thermo.OpenLoopPolicy(lambda t: 1.0), 1.0,
                            STANDARD, T=0.1, dt=1e-2, seed=1)
    with pytest.raises(FamilyMismatch):
        thermo.verify_information_second_law([led])


def test_refinement_shrinks_pathwise_residual():
    reports = thermo.thermo_refinement(
        lambda: thermo.TrackingDemon(1.0, 4.0), 1.0, STANDARD, T=1.5,
        dts=[4e-3, 2e-3, 1e-3], seed=37, n_trials=200)
    dts = [dt for dt, _ in reports]
    assert dts == [4e-3, 2e-3, 1e-3]
    rms = [rep.corrected_rms for _, rep in reports]
    assert rms[0] > rms[1] > rms[2]
    assert rms[0] / rms[2] > 1.5


def test_refinement_requires_nested_steps():
    with pytest.raises(FamilyMismatch):
        thermo.thermo_refinement(lambda: thermo.TrackingDemon(1.0, 0.0), 1.0,
                                 STANDARD, T=1.0, dts=[3e-3, 2e-3], seed=1,
                                 n_trials=2)


# ---------------------------------------------------------------------------
# the demon against the marginal law
# ---------------------------------------------------------------------------

def test_marginal_ledger_gain_zero_is_classical_equilibrium():
    work, df = thermo.demon_marginal_ledger(1.0, 1.0, 0.0, STANDARD,
                                            T=2.0, dt=1e-3)
    assert work == 0.0
    assert df == 0.0


def test_demon_work_matches_linear_theory():
    ledgers = thermo.thermo_ensemble(lambda: thermo.TrackingDemon(1.0, 4.0),
                                     1.0, STANDARD, T=2.0, dt=1e-3, seed=23,
                                     n_trials=300, threads=2)
    works = np.array([led.work for led in ledgers])
    ref, _ = thermo.demon_marginal_ledger(1.0, 1.0, 4.0, STANDARD,
                                          T=2.0, dt=1e-3)
    se = works.std(ddof=1) / math.sqrt(len(works))
    assert ref < 0.0
    assert abs(works.mean() - ref) <= 3.5 * se


def test_demon_sweep_table():
    rows = thermo.demon_sweep([0.0, 1.0, 4.0], [0.5, 1.0], 1.0, 1.0, STANDARD,
                              dt=2e-3, n_trials=200, seed=31, threads=2)
    assert len(rows) == 6
    by_cell = {(r.gain, r.horizon): r for r in rows}
    for T in (0.5, 1.0):
        # frozen trap from the Boltzmann prior: the classical law is exact
        assert by_cell[(0.0, T)].extracted_marginal == 0.0
        # feedback buys extraction, but never more than the information spent
        r = by_cell[(4.0, T)]
        slack = 3.0 * (r.extracted_stderr + r.information_stderr)
        assert r.extracted <= r.information + slack
    # information accumulates with the horizon
    assert by_cell[(4.0, 1.0)].information > by_cell[(4.0, 0.5)].information
    assert by_cell[(1.0, 1.0)].information > by_cell[(1.0, 0.5)].information


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_policy_stiffness_floor():
    with pytest.raises(NotNormalizable):
        thermo.thermo_run(thermo.OpenLoopPolicy(lambda t: -1.0), 1.0,
                          STANDARD, T=0.1, dt=1e-2, seed=1)


def test_tracking_demon_rejects_negative_gain():
    with pytest.raises(FamilyMismatch):
        thermo.TrackingDemon(1.0, -0.5)


def test_unknown_work_quadrature():
    with pytest.raises(FamilyMismatch):
        thermo.thermo_run(thermo.OpenLoopPolicy(lambda t: 1.0), 1.0, STANDARD,
                          T=0.1, dt=1e-2, seed=1, work_quadrature="simpson")


def test_prior_must_be_scalar_gaussian(mu_nu):
    mu, _ = mu_nu
    with pytest.raises(FamilyMismatch):
        thermo.thermo_run(thermo.OpenLoopPolicy(lambda t: 1.0), 1.0, mu,
                          T=0.1, dt=1e-2, seed=1)
    wide = measures.gaussian_measure(np.zeros(2), np.eye(2))
    with pytest.raises(FamilyMismatch):
        thermo.thermo_run(thermo.OpenLoopPolicy(lambda t: 1.0), 1.0, wide,
                          T=0.1, dt=1e-2, seed=1)


def test_quadrature_conventions_differ_but_agree_in_the_limit():
    mid = thermo.thermo_run(thermo.TrackingDemon(1.0, 4.0), 1.0, STANDARD,
                            T=1.0, dt=1e-3, seed=41)
    left = thermo.thermo_run(thermo.TrackingDemon(1.0, 4.0), 1.0, STANDARD,
                             T=1.0, dt=1e-3, seed=41, work_quadrature="left")
    gap = abs(mid.work - left.work)
    assert gap > 0.0
    assert gap < 0.01
