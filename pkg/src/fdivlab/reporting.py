"""Report emission: delimited tables, JSON verdicts, and rendered figures.

Every numeric CSV cell is written with 17 significant digits, which is
enough to round-trip a float64 exactly: a rerun with the same config and
seed therefore produces byte-identical numeric columns at any thread
count.  Verdict files are JSON with explicit pass/fail booleans and the
confidence intervals behind them.  Each table also gets a rendered PNG
figure next to it (Agg backend, no display needed).
"""

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import IoFailure

FLOAT_FMT = "%.17g"

# log-scale plots clip at this floor so exact zeros don't kill the axis
_PLOT_FLOOR = 1e-300


def format_cell(value) -> str:
    """One CSV cell: ints as ints, floats at 17 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return "%d" % value
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT % value
    return str(value)


def write_csv(path: str, columns) -> str:
    """Write named columns as UTF-8 CSV with a header row and LF endings.

    ``columns`` is a sequence of (name, values) pairs; all value sequences
    must have equal length.
    """
    names = [name for name, _ in columns]
    arrays = [np.asarray(vals) for _, vals in columns]
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise IoFailure(f"ragged columns for {path}: lengths {sorted(lengths)}")
    n_rows = lengths.pop() if lengths else 0
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(names) + "\n")
            for i in range(n_rows):
                fh.write(",".join(format_cell(a[i]) for a in arrays) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not np.isfinite(v):
            return repr(v)  # json has no nan/inf literals
        return v
    return obj


def write_json(path: str, payload: dict) -> str:
    """Write a verdict payload as pretty-printed, key-sorted JSON."""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def render_lines(path: str, x, curves, xlabel="t", ylabel="value",
                 logy=False, bands=None, title=None) -> str:
    """Render named curves over a common abscissa to a PNG file.

    curves: sequence of (label, y-array); bands: optional dict
    label -> (lo, hi) shaded one-sigma style envelopes.
    """
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    x = np.asarray(x, dtype=float)
    for label, y in curves:
        y = np.asarray(y, dtype=float)
        if logy:
            y = np.maximum(np.abs(y), _PLOT_FLOOR)
        ax.plot(x, y, label=label, lw=1.4)
        if bands and label in bands:
            lo, hi = bands[label]
            lo = np.asarray(lo, dtype=float)
            hi = np.asarray(hi, dtype=float)
            if logy:
                lo = np.maximum(lo, _PLOT_FLOOR)
                hi = np.maximum(hi, _PLOT_FLOOR)
            ax.fill_between(x, lo, hi, alpha=0.25, lw=0)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(curves) > 1 or bands:
        ax.legend(frameon=False, fontsize=9)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    try:
        fig.savefig(path, dpi=110)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def render_scatter(path: str, x, y, xlabel, ylabel, title=None,
                   hline=None) -> str:
    """Scatter plot helper for per-trial ledgers and sweep tables."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(np.asarray(x, dtype=float), np.asarray(y, dtype=float),
            "o", ms=3.5, alpha=0.7)
    if hline is not None:
        ax.axhline(hline, color="k", lw=0.8, ls="--")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    try:
        fig.savefig(path, dpi=110)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# per-experiment emitters.  Each takes a result object plus a path stem
# (directory + "kind-confighash8") and returns the list of files written.
# ---------------------------------------------------------------------------

def emit_flow(result, stem: str):
    """DivergenceFlowResult -> CSV of divergences/rates + log-scale figure."""
    csv = write_csv(stem + ".csv", [
        ("time", result.times),
        ("kl", result.kl),
        ("chi2", result.chi2),
        ("tv", result.tv),
        ("fisher", result.fisher),
        ("energy", result.energy),
        ("residual_kl", result.residual_kl),
        ("residual_chi2", result.residual_chi2),
    ])
    png = render_lines(stem + ".png", result.times,
                       [("KL", result.kl), ("chi2", result.chi2),
                        ("TV", result.tv)],
                       ylabel="divergence", logy=True,
                       title="forward flow divergences")
    return [csv, png]


def emit_ensemble_curves(curves, stem: str):
    """EnsembleCurves -> CSV of means/stderrs + figure with 1-sigma bands."""
    cols = [("time", curves.times)]
    plot = []
    bands = {}
    for name in sorted(curves.mean):
        m = curves.mean[name]
        se = curves.stderr[name]
        cols.append((name + "_mean", m))
        cols.append((name + "_stderr", se))
        plot.append((name, m))
        bands[name] = (m - se, m + se)
    csv = write_csv(stem + ".csv", cols)
    png = render_lines(stem + ".png", curves.times, plot,
                       ylabel="ensemble mean divergence", bands=bands,
                       title=f"dual-filter divergences ({curves.n_trials} trials)")
    return [csv, png]


def emit_backward_map(report, stem: str):
    """IdentityReport -> per-state backward-map CSV + verdict JSON + figure."""
    est = report.table
    csv = write_csv(stem + "-y0.csv", [
        ("state", np.arange(len(est.values))),
        ("y0", est.values),
        ("y0_stderr", est.stderrs),
        ("sq_dev", est.sq_devs),
        ("sq_dev_stderr", est.sq_dev_stderrs),
        ("n_trials", np.full(len(est.values), est.n_trials)),
    ])
    verdict = {
        "horizon": report.horizon,
        "n_trials": est.n_trials,
        "lhs_mean_chi2": report.lhs,
        "lhs_stderr": report.lhs_stderr,
        "rhs_mean_gap": report.rhs,
        "rhs_stderr": report.rhs_stderr,
        "nu_mean_y0": report.nu_y0,
        "nu_mean_stderr": report.nu_y0_stderr,
        "var_y0": report.var_y0,
        "var_gamma_terminal": report.var_gamma,
        "chi2_prior": report.chi2_priors,
        "checks": {
            "estimators_overlap": report.estimators_overlap,
            "normalized": report.normalized,
            "jensen": report.jensen_ok,
            "cauchy_schwarz": report.cauchy_schwarz_ok,
        },
        "pass": report.passed,
    }
    js = write_json(stem + ".json", verdict)
    x = np.arange(len(est.values))
    png = render_lines(stem + ".png", x,
                       [("y0", est.values)],
                       xlabel="initial state", ylabel="backward map y0",
                       bands={"y0": (est.values - 3 * est.stderrs,
                                     est.values + 3 * est.stderrs)},
                       title="backward map with 3-sigma bands")
    return [csv, js, png]


def emit_bound_report(report, stem: str):
    """BoundReport -> per-horizon CSV + verdict JSON + log-scale figure."""
    T = np.array([r.horizon for r in report.rows])
    lhs = np.array([r.lhs for r in report.rows])
    se = np.array([r.lhs_stderr for r in report.rows])
    rhs = np.array([r.rhs for r in report.rows])
    ok = np.array([r.passed for r in report.rows])
    csv = write_csv(stem + ".csv", [
        ("T", T), ("lhs", lhs), ("lhs_stderr", se), ("rhs", rhs),
        ("pass", ok.astype(int)),
    ])
    verdict = {
        "ess_inf": report.a_low,
        "poincare_rate": report.c_pi,
        "chi2_prior": report.chi2_prior,
        "rows": [{"T": r.horizon, "lhs": r.lhs, "lhs_stderr": r.lhs_stderr,
                  "rhs": r.rhs, "pass": r.passed} for r in report.rows],
        "pass": report.passed,
    }
    js = write_json(stem + ".json", verdict)
    png = render_lines(stem + ".png", T,
                       [("E chi2(filters)", lhs), ("bound", rhs)],
                       xlabel="T", ylabel="value", logy=True,
                       title="filter-stability bound")
    return [csv, js, png]


def martingale_z_scores(mean, stderr) -> np.ndarray:
    """Per-time z of E[Y_t(X_t)] - 1, with 0/0 -> 0 (degenerate exact runs)."""
    resid = np.asarray(mean, dtype=float) - 1.0
    se = np.asarray(stderr, dtype=float)
    safe = np.where(se > 0.0, se, 1.0)
    return np.where(se > 0.0, resid / safe,
                    np.where(resid == 0.0, 0.0, np.inf))


def emit_bsde(solution, energy, match, stem: str):
    """BSDESolution + EnergyReport + per-state match dict -> files."""
    z = martingale_z_scores(solution.martingale_mean,
                            solution.martingale_stderr)
    csv = write_csv(stem + ".csv", [
        ("time", solution.times),
        ("martingale_mean", solution.martingale_mean),
        ("martingale_stderr", solution.martingale_stderr),
        ("martingale_z", z),
    ])
    mart_max = float(np.max(np.abs(z)))
    verdict = {
        "y0": solution.y0,
        "y0_stderr": solution.y0_stderr,
        "match": match,
        "martingale_max_z": mart_max,
        "energy": {
            "var_y0": energy.var_y0,
            "var_gamma": energy.var_gamma,
            "energy_integral": energy.energy_integral,
            "residual": energy.residual,
            "weak_form_ok": energy.weak_form_ok,
        },
        "pass": bool(match["pass"] and energy.weak_form_ok
                     and mart_max <= 3.0),
    }
    js = write_json(stem + ".json", verdict)
    m = solution.martingale_mean
    se = solution.martingale_stderr
    png = render_lines(stem + ".png", solution.times, [("E Y_t(X_t)", m)],
                       bands={"E Y_t(X_t)": (m - 3 * se, m + 3 * se)},
                       ylabel="ensemble mean", title="terminal-ratio martingale")
    return [csv, js, png]


def emit_thermo(ledgers, report, stem: str):
    """Per-trial ledger CSV + ensemble verdict JSON + fluctuation figure."""
    trial = np.array([l.trial for l in ledgers])
    csv = write_csv(stem + ".csv", [
        ("trial", trial),
        ("W", np.array([l.work for l in ledgers])),
        ("dF", np.array([l.delta_f for l in ledgers])),
        ("D_contrib", np.array([l.dissipation for l in ledgers])),
        ("I_contrib", np.array([l.information for l in ledgers])),
        ("fluctuation", np.array([l.fluctuation for l in ledgers])),
        ("corrected_residual", np.array([l.corrected_residual for l in ledgers])),
    ])
    verdict = {
        "n_trials": report.n_trials,
        "lhs_mean_w_minus_df": report.lhs,
        "rhs_d_minus_i": report.rhs,
        "stderr": report.stderr,
        "dissipation": report.dissipation,
        "information": report.information,
        "z_score": report.z_score,
        "corrected_mean": report.corrected_mean,
        "corrected_rms": report.corrected_rms,
        "checks": {
            "identity_z_within_3": report.passed,
            "information_bound": report.information_bound_ok,
        },
        "pass": bool(report.passed and report.information_bound_ok),
    }
    js = write_json(stem + ".json", verdict)
    png = render_scatter(stem + ".png", trial,
                         [l.fluctuation for l in ledgers],
                         xlabel="trial", ylabel="W - dF - (D - I)",
                         title="per-trial ledger fluctuation", hline=0.0)
    return [csv, js, png]


def emit_demon_sweep(rows, stem: str):
    """Demon sweep rows -> one CSV row per (gain, T) cell + figure."""
    csv = write_csv(stem + ".csv", [
        ("gain", np.array([r.gain for r in rows])),
        ("T", np.array([r.horizon for r in rows])),
        ("extracted", np.array([r.extracted for r in rows])),
        ("extracted_stderr", np.array([r.extracted_stderr for r in rows])),
        ("info", np.array([r.information for r in rows])),
        ("info_stderr", np.array([r.information_stderr for r in rows])),
        ("efficiency", np.array([r.efficiency for r in rows])),
        ("extracted_marginal", np.array([r.extracted_marginal for r in rows])),
    ])
    horizons = sorted({r.horizon for r in rows})
    curves = []
    for T in horizons:
        sub = [r for r in rows if r.horizon == T]
        sub.sort(key=lambda r: r.gain)
        curves.append((f"T={T:g}", [r.efficiency for r in sub]))
    gains = sorted({r.gain for r in rows})
    png = render_lines(stem + ".png", gains, curves,
                       xlabel="feedback gain", ylabel="extracted / information",
                       title="demon efficiency")
    return [csv, png]


def emit_sde_report(report, stem: str):
    """SdeReport (filter divergence drift verification) -> CSV + JSON."""
    checks = [report.kl, report.chi2]
    csv = write_csv(stem + "-drift.csv", [
        ("series", [c.name for c in checks]),
        ("total_mean", np.array([c.total_mean for c in checks])),
        ("total_stderr", np.array([c.total_stderr for c in checks])),
        ("total_z", np.array([c.total_z for c in checks])),
        ("step_z_max", np.array([c.step_z_max for c in checks])),
        ("step_z_frac_over_3", np.array([c.step_z_frac_over_3 for c in checks])),
        ("corrected_rms", np.array([c.corrected_rms for c in checks])),
        ("alt_total_z", np.array([np.nan if c.alt_total_z is None
                                  else c.alt_total_z for c in checks])),
    ])
    return [csv]
