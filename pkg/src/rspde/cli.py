"""Command-line front end.

Exit codes: 0 all enabled checks pass, 2 invalid configuration, 3 problem
data violates the standing assumptions, 4 numerical abort, 5 an acceptance
check failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import json
import logging
import os
import platform
import sys
from importlib import resources

import jsonschema
import numpy as np
import scipy

from .bdsde import bdsde_residual, max_residual, reconstruct
from .coefficients import AssumptionError, problem_from_dict, validate
from .convergence import (B_STREAM, W_STREAM, X_STREAM, default_profiles, duality_check,
                          penalty_sweep, uniform_starts)
from .domain import DomainError, ProjectionError
from .paths import DEFAULT_KAPPA, CalibrationError, calibrate_star_convention, sample_path, \
    sample_paths
from .solver import NumericalAbort, StabilityError, solve

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTIONS, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 2, 3, 4, 5
EXPERIMENTS = ("baseline", "penalty-sweep", "residuals", "duality", "calibrate-star",
               "validate-only")
DEFAULT_NS = (4, 8, 16, 32, 64, 128, 256)

log = logging.getLogger("rspde")


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    text = resources.files("rspde").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def bundled_config(name: str) -> dict:
    """One of the example run configurations shipped with the package."""
    text = resources.files("rspde").joinpath(f"configs/{name}.json").read_text()
    return json.loads(text)


def _parse_list(text: str, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}") from exc


def build_run_config(doc: dict, args) -> dict:
    """Merge flag overrides into a schema-checked document."""
    doc = copy.deepcopy(doc)
    if args.experiment:
        doc["experiment"] = args.experiment
    if args.ns:
        doc["ns"] = _parse_list(args.ns, float)
    if args.seeds:
        doc["seeds"] = _parse_list(args.seeds, int)
    if args.out:
        doc["output"] = args.out
    if args.kappa is not None:
        doc["kappa"] = args.kappa
    if args.grid:
        try:
            M, N = (int(v) for v in args.grid.lower().split("x"))
        except ValueError as exc:
            raise ConfigError(f"--grid expects MxN, got {args.grid!r}") from exc
        doc.setdefault("problem", {}).setdefault("grid", {}).update({"M": M, "N": N})
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise ConfigError(f"config invalid at '{path}': {exc.message}") from None
    doc.setdefault("experiment", "baseline")
    doc.setdefault("ns", list(DEFAULT_NS))
    doc.setdefault("seeds", [0])
    doc.setdefault("output", "rspde-out")
    doc.setdefault("kappa", None)
    doc.setdefault("n_paths", 2000)
    doc.setdefault("duality_samples", 10000)
    doc.setdefault("refinements", 3)
    return doc


# ---------------------------------------------------------------------------
# output helpers


def _write_rows(path, columns, rows, meta) -> None:
    with open(path, "w", newline="") as fh:
        for key, val in meta.items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c]
                        for c in columns])


def _check(checks: dict, name: str, ok: bool, detail: str) -> None:
    checks[name] = {"pass": bool(ok), "detail": detail}


# ---------------------------------------------------------------------------
# experiments


def exp_baseline(problem, run, meta, out):
    rows, checks = [], {}
    co = problem.coefficients
    unforced = all(co.names.get(r, "zero") == "zero" for r in "fgh")
    for seed in run["seeds"]:
        W = sample_path(problem.T, problem.grid.N, problem.l, W_STREAM + seed)
        for n in run["ns"]:
            sol, meas, _ = solve(problem, W, float(n))
            rows.append({"n": float(n), "seed": seed, "tv_nu": meas.total_variation(),
                         "max_abs_u": float(np.abs(sol.values).max())})
    _write_rows(os.path.join(out, "baseline.csv"), ("n", "seed", "tv_nu", "max_abs_u"),
                rows, meta)
    mass = max(r["tv_nu"] for r in rows)
    if unforced:
        _check(checks, "reflection_mass_zero", mass == 0.0, f"max total variation {mass!r}")
    return checks, {"max_tv_nu": mass}


def sweep_checks(report) -> dict:
    """Pass/fail verdicts on a penalty sweep."""
    checks = {}
    fit = report.slopes.get("dist2_integral")
    if fit is not None:
        _check(checks, "dist2_rate", -1.3 <= fit.slope <= -0.7, f"slope {fit.slope:.3f}")
    d4 = report.seed_mean("dist4_sup")
    if len(d4) > 1:
        _check(checks, "dist4_decay", d4[-1] <= 0.1 * d4[0], f"ratio {d4[-1] / d4[0]:.3g}")
    gaps = report.seed_mean("cauchy_gap")
    if len(gaps) > 1:
        worst = max(b / a for a, b in zip(gaps, gaps[1:]) if a > 0) if np.all(gaps[:-1] > 0) \
            else 0.0
        _check(checks, "cauchy_monotone", worst <= 1.10, f"worst step ratio {worst:.3f}")
    for name in ("squared_tv", "tv_nu"):
        v = report.seed_mean(name)
        if len(v) > 1 and v.min() > 0:
            _check(checks, f"{name}_bounded", v.max() / v.min() <= 3.0,
                   f"max/min {v.max() / v.min():.3f}")
    frac = report.seed_mean("boundary_mass_fraction")[-1]
    _check(checks, "boundary_localization", frac <= 0.05, f"fraction {frac:.4f}")
    return checks


def exp_sweep(problem, run, meta, out):
    kappa = run["kappa"] if run["kappa"] is not None else DEFAULT_KAPPA
    report = penalty_sweep(problem, run["ns"], run["seeds"], n_paths=run["n_paths"],
                           kappa=kappa)
    report.meta.update(meta)
    report.write(out)
    summary = {name: (None if fit is None else fit.slope) for name, fit in report.slopes.items()}
    return (sweep_checks(report) if len(run["ns"]) >= 4 else {}), summary


def exp_residuals(problem, run, meta, out):
    """BDSDE residual under simultaneous refinement (dx/2, dt/4)."""
    kappa = run["kappa"] if run["kappa"] is not None else DEFAULT_KAPPA
    n = float(max(run["ns"]))
    levels = run["refinements"]
    base = problem.grid
    Nf = base.N * 4 ** (levels - 1)
    rows = []
    for seed in run["seeds"]:
        Wf = sample_path(problem.T, Nf, problem.l, W_STREAM + seed)
        Bf = sample_paths(problem.T, Nf, problem.d, run["n_paths"], B_STREAM + seed)
        x = uniform_starts(base, run["n_paths"], X_STREAM + seed) * 0.25
        for lev in range(levels):
            grid = base.refined(2 ** lev, 4 ** lev)
            cfg = copy.copy(problem)
            cfg.grid = grid
            W = Wf.coarsen(Nf // grid.N)
            B = Bf[:: Nf // grid.N]
            sol, _, _ = solve(cfg, W, n)
            tr = reconstruct(sol, B, 0.0, x)
            R = max_residual(bdsde_residual(tr, sol, W, cfg.coefficients, cfg.terminal, kappa))
            rows.append({"seed": seed, "M": grid.M, "N": grid.N, "dt": cfg.dt,
                         "mean_max_residual": float(R.mean()),
                         "se": float(R.std(ddof=1) / np.sqrt(R.size))})
    _write_rows(os.path.join(out, "residuals.csv"),
                ("seed", "M", "N", "dt", "mean_max_residual", "se"), rows, meta)
    dts = np.array(sorted({r["dt"] for r in rows}, reverse=True))
    means = np.array([np.mean([r["mean_max_residual"] for r in rows if r["dt"] == dt])
                      for dt in dts])
    checks = {}
    if np.all(means > 0):
        slope = float(np.polyfit(np.log(dts), np.log(means), 1)[0])
        _check(checks, "bdsde_residual_rate", slope >= 0.4, f"slope {slope:.3f}")
    else:
        slope = float("nan")
        _check(checks, "bdsde_residual_rate", bool(np.all(means == 0)), "residual identically 0")
    return checks, {"residual_slope": slope}


def exp_duality(problem, run, meta, out):
    n = float(max(run["ns"]))
    P = run["duality_samples"]
    phi, psi = default_profiles(problem)
    rows, checks = [], {}
    for seed in run["seeds"]:
        W = sample_path(problem.T, problem.grid.N, problem.l, W_STREAM + seed)
        sol, meas, _ = solve(problem, W, n)
        B = sample_paths(problem.T, problem.grid.N, problem.d, P, B_STREAM + seed)
        x = uniform_starts(problem.grid, P, X_STREAM + seed)
        res = duality_check(meas, sol, reconstruct(sol, B, 0.0, x), phi, psi)
        for i in range(problem.k):
            rows.append({"seed": seed, "component": i, "lhs": float(res.lhs[i]),
                         "rhs": float(res.rhs[i]), "gap": float(res.gap[i]),
                         "se": float(res.se[i]), "degenerate": int(res.degenerate)})
    _write_rows(os.path.join(out, "duality.csv"),
                ("seed", "component", "lhs", "rhs", "gap", "se", "degenerate"), rows, meta)
    worst = max(r["gap"] for r in rows)
    _check(checks, "duality_gap", worst <= 0.05, f"max relative gap {worst:.4f}")
    return checks, {"max_gap": worst}


def exp_calibrate(problem, run, meta, out):
    checks = {}
    try:
        rep = calibrate_star_convention(seed=run["seeds"][0], dim=problem.d)
    except CalibrationError as exc:
        _check(checks, "star_calibration", False, str(exc))
        return checks, {}
    _write_rows(os.path.join(out, "calibration.csv"),
                ("kappa", "dt", "mean_abs_residual", "slope", "slope_stderr"),
                list(rep.as_rows()), meta)
    slope = rep.slopes[rep.kappa]
    _check(checks, "star_calibration", slope >= 0.4, f"kappa {rep.kappa:g}, slope {slope:.3f}")
    return checks, {"kappa": rep.kappa, "slope": slope}


def exp_validate(problem, run, meta, out):
    return {}, {}


RUNNERS = {
    "baseline": exp_baseline,
    "penalty-sweep": exp_sweep,
    "residuals": exp_residuals,
    "duality": exp_duality,
    "calibrate-star": exp_calibrate,
    "validate-only": exp_validate,
}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rspde", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--ns", help="comma-separated penalty levels")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--kappa", type=float, help="forward-backward convention override")
    p.add_argument("--grid", help="grid override MxN")
    p.add_argument("--quiet", action="store_true")
    return p


def _manifest(run, status, checks, summary, report) -> dict:
    return {
        "experiment": run["experiment"],
        "status": status,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "seeds": run["seeds"],
        "ns": run["ns"],
        "kappa": run["kappa"] if run["kappa"] is not None else DEFAULT_KAPPA,
        "grid": run["problem"]["grid"],
        "generator": "PCG64",
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "workers": int(os.environ.get("RSPDE_WORKERS", "1")),
        "config": run,
        "checks": checks,
        "summary": summary,
        "validation": report,
    }


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
        cfg = build_run_config(doc, args)
        problem = problem_from_dict(cfg["problem"])
    except (OSError, json.JSONDecodeError, ConfigError, DomainError, ValueError, KeyError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    out = cfg["output"]
    os.makedirs(out, exist_ok=True)
    report = validate(problem)
    vreport = {"ok": report.ok, "failures": report.failures,
               "witnesses": json.loads(json.dumps(report.witnesses, default=float))}
    if not report.ok:
        for msg in report.failures:
            log.error("assumption failure: %s", msg)
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            json.dump(_manifest(cfg, EXIT_ASSUMPTIONS, {}, {}, vreport), fh, indent=2)
        return EXIT_ASSUMPTIONS

    meta = {"experiment": cfg["experiment"], "seeds": " ".join(map(str, cfg["seeds"])),
            "M": problem.grid.M, "N": problem.grid.N, "L": problem.grid.L,
            "kappa": cfg["kappa"] if cfg["kappa"] is not None else DEFAULT_KAPPA,
            "generator": "PCG64"}
    try:
        checks, summary = RUNNERS[cfg["experiment"]](problem, cfg, meta, out)
    except (NumericalAbort, StabilityError, ProjectionError) as exc:
        log.error("numerical abort: %s", exc)
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            json.dump(_manifest(cfg, EXIT_NUMERICAL, {}, {}, vreport), fh, indent=2)
        return EXIT_NUMERICAL
    except AssumptionError as exc:  # pragma: no cover - validated above
        log.error("assumption failure: %s", exc)
        return EXIT_ASSUMPTIONS

    status = EXIT_OK if all(c["pass"] for c in checks.values()) else EXIT_ACCEPTANCE
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(_manifest(cfg, status, checks, summary, vreport), fh, indent=2, default=float)
    lines = [f"experiment: {cfg['experiment']}", f"exit status: {status}"]
    lines += [f"{'PASS' if c['pass'] else 'FAIL'} {name}: {c['detail']}" for name, c in checks.items()]
    lines += [f"{k} = {v}" for k, v in summary.items()]
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if not args.quiet:
        print("\n".join(lines))
    return status


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
