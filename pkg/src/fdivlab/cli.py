"""Scenario-driven command line front end.

Reads a YAML scenario file, validates it against the per-kind schema,
dispatches to the owning module, and writes the CSV/JSON/PNG reports plus
a run manifest into the output directory.  Exit codes: 0 when every
asserted check passed, 2 when the run completed but a check failed, 1 on
configuration or runtime errors.

Output directory precedence: --out flag, then the FDIVLAB_OUT environment
variable, then the config's own "out" entry, then ./out.
"""

import argparse
import dataclasses
import datetime
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from typing import List, Optional

import numpy as np
import yaml

from . import __version__
from . import filtering, kolmogorov, measures, models, reporting, simulate
from . import stability, thermo
from .errors import ConfigInvalid, FdivlabError

KINDS = (
    "divergence-flow",
    "stability-markov",
    "filter-dual",
    "backward-map",
    "stability-bound",
    "bsde",
    "thermo",
    "demon-sweep",
)

# accepted spellings that map onto a canonical kind
_KIND_ALIASES = {"prop5": "stability-bound"}

_FILTER_KINDS = ("filter-dual", "backward-map", "stability-bound", "bsde")


@dataclass
class ScenarioConfig:
    """Validated scenario: kind, model blocks, numerics, seed, output dir."""

    kind: str
    family: dict
    mu: object                  # dict or the literal string "invariant"
    nu: Optional[object]
    observation: Optional[dict]
    numerics: dict
    seed: int
    out_dir: Optional[str] = None
    options: dict = field(default_factory=dict)
    description: str = ""


@dataclass
class RunManifest:
    """What a run produced, with enough metadata to reproduce it."""

    kind: str
    config_hash: str
    seed: int
    version: str
    created: str
    outputs: List[str]
    passed: bool


def _need(block, key, path):
    if not isinstance(block, dict) or key not in block or block[key] is None:
        raise ConfigInvalid(f"missing required field {path}.{key}")
    return block[key]


def _as_positive(value, path):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{path} must be a number, got {value!r}") from None
    if not v > 0.0:
        raise ConfigInvalid(f"{path} must be positive, got {v!r}")
    return v


def parse_config(raw: dict) -> ScenarioConfig:
    """Validate a raw mapping into a ScenarioConfig (ConfigInvalid on error)."""
    if not isinstance(raw, dict):
        raise ConfigInvalid("config root must be a mapping")
    kind = str(_need(raw, "kind", "config"))
    kind = _KIND_ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ConfigInvalid(
            f"config.kind must be one of {', '.join(KINDS)}; got {kind!r}")

    numerics = _need(raw, "numerics", "config")
    dt = _as_positive(_need(numerics, "dt", "numerics"), "numerics.dt")
    if kind != "demon-sweep":
        T = float(_need(numerics, "T", "numerics"))
        if T < 0.0:
            raise ConfigInvalid(f"numerics.T must be >= 0, got {T!r}")
        if T > 0.0 and dt > T:
            raise ConfigInvalid(f"numerics.dt must be <= numerics.T, got {dt!r} > {T!r}")
    trials_needed = kind in _FILTER_KINDS or kind in ("thermo", "demon-sweep")
    if trials_needed:
        trials = _need(numerics, "trials", "numerics")
        if int(trials) < 1:
            raise ConfigInvalid(f"numerics.trials must be >= 1, got {trials!r}")

    family = _need(raw, "family", "config")
    ftype = _need(family, "type", "family")
    if kind in _FILTER_KINDS and ftype != "finite":
        raise ConfigInvalid(f"family.type must be finite for kind {kind}")
    if kind in ("thermo", "demon-sweep") and ftype != "gaussian":
        raise ConfigInvalid(f"family.type must be gaussian for kind {kind}")

    mu = _need(raw, "mu", "config")
    nu = raw.get("nu")
    if kind in ("filter-dual", "backward-map", "bsde") and nu is None:
        raise ConfigInvalid("missing required field config.nu")

    observation = raw.get("observation")
    if kind in _FILTER_KINDS and observation is None:
        raise ConfigInvalid("missing required field config.observation")
    if kind in ("thermo", "demon-sweep"):
        if observation is None:
            raise ConfigInvalid("missing required field config.observation")
        _need(observation, "H", "observation")

    options = raw.get("options") or {}
    if kind == "thermo":
        _need(options, "policy", "options")
    if kind == "demon-sweep":
        _need(options, "gains", "options")
        _need(options, "horizons", "options")
        _need(options, "stiffness", "options")
    if kind == "stability-bound":
        _need(options, "horizons", "options")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigInvalid(f"config.seed must be an integer, got {seed!r}")

    return ScenarioConfig(
        kind=kind,
        family=family,
        mu=mu,
        nu=nu,
        observation=observation,
        numerics=numerics,
        seed=seed,
        out_dir=raw.get("out"),
        options=options,
        description=str(raw.get("description", "")),
    )


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(raw)


def config_hash(cfg: ScenarioConfig) -> str:
    """8-hex-digit digest of the scientific content (kind..seed, options)."""
    payload = {
        "kind": cfg.kind,
        "family": cfg.family,
        "mu": cfg.mu,
        "nu": cfg.nu,
        "observation": cfg.observation,
        "numerics": cfg.numerics,
        "seed": cfg.seed,
        "options": cfg.options,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:8]


# ---------------------------------------------------------------------------
# block builders
# ---------------------------------------------------------------------------

def _build_generator(cfg: ScenarioConfig) -> models.Generator:
    fam = cfg.family
    ftype = _need(fam, "type", "family")
    if ftype == "finite":
        rates = np.asarray(_need(fam, "rates", "family"), dtype=float)
        return models.finite_generator(rates)
    if ftype == "gaussian":
        K = np.atleast_2d(np.asarray(_need(fam, "stiffness", "family"),
                                     dtype=float))
        return models.gaussian_generator(K)
    if ftype == "langevin":
        gblock = _need(fam, "grid", "family")
        grid = models.Grid(
            x_min=float(_need(gblock, "lo", "family.grid")),
            x_max=float(_need(gblock, "hi", "family.grid")),
            n=int(_need(gblock, "cells", "family.grid")),
        )
        pot = _need(fam, "potential", "family")
        if _need(pot, "type", "family.potential") != "quadratic":
            raise ConfigInvalid("family.potential.type must be quadratic")
        k = float(pot.get("stiffness", 1.0))
        c = float(pot.get("center", 0.0))
        return models.langevin_generator(
            lambda x: 0.5 * k * (x - c) ** 2,
            lambda x: k * (x - c),
            grid,
        )
    raise ConfigInvalid(
        f"family.type must be finite, langevin, or gaussian; got {ftype!r}")


def _build_measure(block, gen: models.Generator, path: str) -> measures.Measure:
    if block == "invariant" or (isinstance(block, dict)
                                and block.get("type") == "invariant"):
        if gen is None:
            raise ConfigInvalid(f"{path} cannot be invariant for this kind")
        return models.invariant_measure(gen)
    mtype = _need(block, "type", path)
    if mtype == "finite":
        p = np.asarray(_need(block, "p", path), dtype=float)
        return measures.finite_measure(p)
    if mtype == "gaussian":
        mean = float(_need(block, "mean", path))
        var = _as_positive(_need(block, "var", path), path + ".var")
        if gen is not None and gen.family == models.LANGEVIN:
            return measures.discretize_gaussian(mean, var, gen.grid)
        return measures.gaussian_measure(mean, var)
    raise ConfigInvalid(f"{path}.type must be finite, gaussian, or invariant")


def _build_observation(block, path: str) -> simulate.ObservationFunction:
    table = np.asarray(_need(block, "h", path), dtype=float)
    if table.ndim == 1:
        table = table[:, None]
    return simulate.obs_table(table)


def _time_function(block, path: str):
    """Constant / sinusoid / ramp scalar functions of time from config."""
    if isinstance(block, (int, float)):
        v = float(block)
        return lambda t: v
    fkind = _need(block, "kind", path)
    if fkind == "constant":
        v = float(_need(block, "value", path))
        return lambda t: v
    if fkind == "sinusoid":
        base = float(block.get("base", 1.0))
        amp = float(block.get("amp", 0.5))
        freq = float(block.get("freq", 1.0))
        return lambda t: base + amp * math.sin(freq * t)
    if fkind == "ramp":
        start = float(block.get("start", 0.0))
        rate = float(_need(block, "rate", path))
        return lambda t: start + rate * t
    raise ConfigInvalid(f"{path}.kind must be constant, sinusoid, or ramp")


def _policy_factory(options: dict):
    block = _need(options, "policy", "options")
    ptype = _need(block, "type", "options.policy")
    if ptype == "tracking-demon":
        k = _as_positive(_need(block, "stiffness", "options.policy"),
                         "options.policy.stiffness")
        gain = float(_need(block, "gain", "options.policy"))
        center0 = float(block.get("center0", 0.0))
        return lambda: thermo.TrackingDemon(k, gain, center0)
    if ptype == "open-loop":
        stiff = _time_function(_need(block, "stiffness", "options.policy"),
                               "options.policy.stiffness")
        center = None
        if block.get("center") is not None:
            center = _time_function(block["center"], "options.policy.center")
        return lambda: thermo.OpenLoopPolicy(stiff, center)
    raise ConfigInvalid(
        "options.policy.type must be tracking-demon or open-loop")


# ---------------------------------------------------------------------------
# per-kind runners: (cfg, stem, threads) -> (passed, outputs)
# ---------------------------------------------------------------------------

def _expect_checks(cfg, times, series_by_name):
    """Decay-rate expectations from options.expect, as verdict rows."""
    rows = []
    for i, item in enumerate(cfg.options.get("expect", [])):
        name = _need(item, "series", f"options.expect[{i}]")
        target = float(_need(item, "rate", f"options.expect[{i}]"))
        rel_tol = float(item.get("rel_tol", 0.02))
        if name not in series_by_name:
            raise ConfigInvalid(
                f"options.expect[{i}].series must be one of "
                f"{sorted(series_by_name)}")
        fitted = kolmogorov.decay_rate_fit(times, series_by_name[name])
        ok = abs(fitted - target) <= rel_tol * abs(target)
        rows.append({"series": name, "fitted_rate": fitted,
                     "target_rate": target, "rel_tol": rel_tol, "pass": ok})
    return rows


def _run_flow(cfg: ScenarioConfig, stem: str, threads: int):
    gen = _build_generator(cfg)
    mu0 = _build_measure(cfg.mu, gen, "mu")
    nu0 = _build_measure(cfg.nu if cfg.nu is not None else "invariant",
                         gen, "nu")
    if cfg.kind == "stability-markov":
        nu0 = models.invariant_measure(gen)
    T = float(cfg.numerics["T"])
    dt = float(cfg.numerics["dt"])
    result = kolmogorov.divergence_flow(gen, mu0, nu0, T, dt)
    outputs = reporting.emit_flow(result, stem)

    series = {"kl": result.kl, "chi2": result.chi2, "tv": result.tv}
    fits = _expect_checks(cfg, result.times, series)
    mass_ok = abs(result.mass_drift) <= 1e-8
    verdict = {
        "mass_drift": result.mass_drift,
        "max_residual_kl": result.max_residual_kl,
        "max_residual_chi2": result.max_residual_chi2,
        "rate_fits": fits,
        "checks": {"mass_conserved": mass_ok},
        "pass": bool(mass_ok and all(r["pass"] for r in fits)),
    }
    if cfg.kind == "stability-markov":
        verdict["poincare_rate"] = kolmogorov.poincare_constant(gen)
    outputs.append(reporting.write_json(stem + ".json", verdict))
    return verdict["pass"], outputs


def _run_filter_dual(cfg: ScenarioConfig, stem: str, threads: int):
    gen = _build_generator(cfg)
    mu = _build_measure(cfg.mu, gen, "mu")
    nu = _build_measure(cfg.nu, gen, "nu")
    h = _build_observation(cfg.observation, "observation")
    T = float(cfg.numerics["T"])
    dt = float(cfg.numerics["dt"])
    trials = int(cfg.numerics["trials"])
    store_every = int(cfg.numerics.get("store_every", 1))
    curves = filtering.ensemble_divergence(gen, h, mu, nu, T, dt, cfg.seed,
                                           trials, store_every, threads)
    outputs = reporting.emit_ensemble_curves(curves, stem)

    d0 = measures.divergence(measures.KL, mu, nu)
    initial_exact = bool(np.all(curves.initial["kl"] == d0))
    monotone = curves.monotone_within("kl", 2.0)
    verdict = {
        "n_trials": trials,
        "initial_kl": d0,
        "checks": {"initial_exact": bool(initial_exact),
                   "kl_supermartingale_2sigma": bool(monotone)},
    }
    passed = bool(initial_exact and monotone)
    if cfg.options.get("verify_drifts"):
        rep = filtering.verify_divergence_sde(gen, h, mu, nu, T, dt, cfg.seed,
                                              trials, threads)
        outputs.extend(reporting.emit_sde_report(rep, stem))
        verdict["drift_checks"] = {
            "kl": {"total_z": rep.kl.total_z,
                   "step_z_frac_over_3": rep.kl.step_z_frac_over_3,
                   "corrected_rms": rep.kl.corrected_rms,
                   "alt_total_z": rep.kl.alt_total_z,
                   "pass": rep.kl.passed},
            "chi2": {"total_z": rep.chi2.total_z,
                     "step_z_frac_over_3": rep.chi2.step_z_frac_over_3,
                     "corrected_rms": rep.chi2.corrected_rms,
                     "alt_total_z": rep.chi2.alt_total_z,
                     "pass": rep.chi2.passed},
        }
        passed = passed and rep.passed
    verdict["pass"] = passed
    outputs.append(reporting.write_json(stem + ".json", verdict))
    return passed, outputs


def _run_backward_map(cfg: ScenarioConfig, stem: str, threads: int):
    gen = _build_generator(cfg)
    mu = _build_measure(cfg.mu, gen, "mu")
    nu = _build_measure(cfg.nu, gen, "nu")
    h = _build_observation(cfg.observation, "observation")
    report = stability.chi2_identity_check(
        gen, h, mu, nu, float(cfg.numerics["T"]), float(cfg.numerics["dt"]),
        int(cfg.numerics["trials"]), cfg.seed, threads)
    outputs = reporting.emit_backward_map(report, stem)
    return report.passed, outputs


def _run_stability_bound(cfg: ScenarioConfig, stem: str, threads: int):
    gen = _build_generator(cfg)
    mu = _build_measure(cfg.mu, gen, "mu")
    h = _build_observation(cfg.observation, "observation")
    horizons = [float(t) for t in cfg.options["horizons"]]
    report = stability.filter_chi2_bound_check(
        gen, h, mu, horizons, float(cfg.numerics["dt"]),
        int(cfg.numerics["trials"]), cfg.seed, threads)
    outputs = reporting.emit_bound_report(report, stem)
    return report.passed, outputs


def _run_bsde(cfg: ScenarioConfig, stem: str, threads: int):
    gen = _build_generator(cfg)
    mu = _build_measure(cfg.mu, gen, "mu")
    nu = _build_measure(cfg.nu, gen, "nu")
    h = _build_observation(cfg.observation, "observation")
    T = float(cfg.numerics["T"])
    dt = float(cfg.numerics["dt"])
    trials = int(cfg.numerics["trials"])
    degree = int(cfg.options.get("basis_degree", 2))
    solution = stability.solve_bsde_regression(gen, h, mu, nu, T, dt, trials,
                                               degree, cfg.seed)
    energy = stability.energy_identity_check(solution)

    ref_trials = int(cfg.options.get("reference_trials", trials))
    states = []
    for x in range(gen.dim):
        entry = stability.backward_map_mc(gen, h, mu, nu, x, T, dt,
                                          ref_trials, cfg.seed)
        gap = abs(solution.y0[x] - entry.value)
        tol = 3.0 * (solution.y0_stderr[x] + entry.stderr)
        states.append({"state": x, "y0_bsde": solution.y0[x],
                       "y0_bsde_stderr": solution.y0_stderr[x],
                       "y0_mc": entry.value, "y0_mc_stderr": entry.stderr,
                       "pass": bool(gap <= tol)})
    match = {"states": states, "pass": all(s["pass"] for s in states)}

    z = reporting.martingale_z_scores(solution.martingale_mean,
                                      solution.martingale_stderr)
    passed = bool(match["pass"] and energy.weak_form_ok
                  and float(np.max(np.abs(z))) <= 3.0)
    outputs = reporting.emit_bsde(solution, energy, match, stem)
    return passed, outputs


def _run_thermo(cfg: ScenarioConfig, stem: str, threads: int):
    H = float(cfg.observation["H"])
    gen = None
    mu0 = _build_measure(cfg.mu, gen, "mu")
    T = float(cfg.numerics["T"])
    dt = float(cfg.numerics["dt"])
    trials = int(cfg.numerics["trials"])
    quad = str(cfg.options.get("work_quadrature", "midpoint"))
    factory = _policy_factory(cfg.options)
    ledgers = thermo.thermo_ensemble(factory, H, mu0, T, dt, cfg.seed, trials,
                                     threads, work_quadrature=quad)
    report = thermo.verify_information_second_law(ledgers)
    outputs = reporting.emit_thermo(ledgers, report, stem)
    passed = bool(report.passed and report.information_bound_ok)
    if cfg.options.get("expect_negative_extraction"):
        passed = passed and report.lhs < 0.0
    return passed, outputs


def _run_demon_sweep(cfg: ScenarioConfig, stem: str, threads: int):
    H = float(cfg.observation["H"])
    mu0 = _build_measure(cfg.mu, None, "mu")
    dt = float(cfg.numerics["dt"])
    trials = int(cfg.numerics["trials"])
    gains = [float(g) for g in cfg.options["gains"]]
    horizons = [float(t) for t in cfg.options["horizons"]]
    k = _as_positive(cfg.options["stiffness"], "options.stiffness")
    rows = thermo.demon_sweep(gains, horizons, k, H, mu0, dt, trials,
                              cfg.seed, threads)
    outputs = reporting.emit_demon_sweep(rows, stem)

    eff_ok = True
    for r in rows:
        if r.information > 0.0:
            slack = 3.0 * r.extracted_stderr / r.information
            if not (-slack <= r.efficiency <= 1.0 + slack):
                eff_ok = False
    # without feedback the classical (marginal) ledger must show no
    # extraction; the conditional ledger still moves because observing
    # alone sharpens the conditional state
    zero_ok = all(r.extracted_marginal <= 1e-9
                  for r in rows if r.gain == 0.0)
    info_monotone = True
    for g in gains:
        sub = sorted((r for r in rows if r.gain == g), key=lambda r: r.horizon)
        for a, b in zip(sub, sub[1:]):
            pair_se = math.hypot(a.information_stderr, b.information_stderr)
            if b.information < a.information - 3.0 * pair_se:
                info_monotone = False
    passed = bool(eff_ok and zero_ok and info_monotone)
    verdict = {
        "cells": len(rows),
        "checks": {"efficiency_in_unit_band": eff_ok,
                   "no_extraction_without_feedback": zero_ok,
                   "information_monotone_in_T": info_monotone},
        "pass": passed,
    }
    outputs.append(reporting.write_json(stem + ".json", verdict))
    return passed, outputs


_RUNNERS = {
    "divergence-flow": _run_flow,
    "stability-markov": _run_flow,
    "filter-dual": _run_filter_dual,
    "backward-map": _run_backward_map,
    "stability-bound": _run_stability_bound,
    "bsde": _run_bsde,
    "thermo": _run_thermo,
    "demon-sweep": _run_demon_sweep,
}


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def resolve_out_dir(cfg: ScenarioConfig, flag: Optional[str]) -> str:
    if flag:
        return flag
    env = os.environ.get("FDIVLAB_OUT")
    if env:
        return env
    if cfg.out_dir:
        return cfg.out_dir
    return os.path.join(".", "out")


def run_scenario(cfg: ScenarioConfig, out_dir: Optional[str] = None,
                 threads: Optional[int] = None) -> RunManifest:
    """Execute one scenario and write its reports plus a manifest."""
    if threads is None:
        threads = os.cpu_count() or 1
    out = resolve_out_dir(cfg, out_dir)
    os.makedirs(out, exist_ok=True)
    digest = config_hash(cfg)
    stem = os.path.join(out, f"{cfg.kind}-{digest}")

    passed, outputs = _RUNNERS[cfg.kind](cfg, stem, int(threads))
    manifest = RunManifest(
        kind=cfg.kind,
        config_hash=digest,
        seed=cfg.seed,
        version=__version__,
        created=datetime.datetime.now(datetime.timezone.utc)
                .isoformat(timespec="seconds"),
        outputs=[os.path.abspath(p) for p in outputs],
        passed=passed,
    )
    manifest_path = stem + "-manifest.json"
    reporting.write_json(manifest_path, dataclasses.asdict(manifest))
    manifest.outputs.append(os.path.abspath(manifest_path))
    return manifest


def packaged_scenarios():
    """(name, path, description) for every scenario shipped in the package."""
    rows = []
    base = resources.files("fdivlab").joinpath("scenarios")
    for entry in sorted(base.iterdir(), key=lambda e: e.name):
        if not entry.name.endswith(".yaml"):
            continue
        try:
            raw = yaml.safe_load(entry.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError:
            raw = {}
        rows.append((entry.name[:-5], str(entry),
                     str(raw.get("description", ""))))
    return rows


def _resolve_config_arg(arg: str) -> str:
    if os.path.exists(arg):
        return arg
    name = arg[:-5] if arg.endswith(".yaml") else arg
    for sname, path, _ in packaged_scenarios():
        if sname == name:
            return path
    raise ConfigInvalid(
        f"no such config file or packaged scenario: {arg!r} "
        "(try `fdivlab list-scenarios`)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdivlab",
        description="divergence-dissipation, filter-stability, and "
                    "information-thermodynamics experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and write reports")
    run_p.add_argument("config",
                       help="path to a YAML config, or a packaged scenario name")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed")
    run_p.add_argument("--threads", type=int, default=None,
                       help="max worker threads (default: hardware concurrency)")
    run_p.add_argument("--out", default=None, help="output directory")

    val_p = sub.add_parser("validate", help="check a config without running it")
    val_p.add_argument("config")

    sub.add_parser("list-scenarios", help="list packaged scenario configs")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "list-scenarios":
            for name, _, desc in packaged_scenarios():
                print(f"{name:28s} {desc}")
            return 0
        path = _resolve_config_arg(args.config)
        cfg = load_config(path)
        if args.command == "validate":
            print(f"ok: {cfg.kind} scenario ({config_hash(cfg)})")
            return 0
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        manifest = run_scenario(cfg, out_dir=args.out, threads=args.threads)
        for p in manifest.outputs:
            print(p)
        print(f"{'PASS' if manifest.passed else 'FAIL'} "
              f"{cfg.kind}-{manifest.config_hash}")
        return 0 if manifest.passed else 2
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FdivlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
