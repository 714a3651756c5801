"""Batch command line: ``exitrate <subcommand> --config FILE [overrides]``.

Exit status: 0 success, 1 configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

from . import csvio
from .config import ConfigError, ScenarioConfig, load_config
from .control import policy_iteration, verify_solution
from .operator import EigenSolveError, assemble, build_grid, principal_eigenpair
from .simulate import (AllCensoredError, RiskConfig, fit_exit_rate, mean_exit_from_sample,
                       risk_value_from_sample, run_ensemble, sample_path,
                       survival_from_sample)

log = logging.getLogger("exitrate")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
COMMANDS = ("validate", "simulate", "survival", "meantime", "eigen", "optimize", "verify", "risk")


class NumericalFailure(RuntimeError):
    pass


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# --------------------------------------------------------------------------
# subcommands: each returns (exit status, {name: path})
# --------------------------------------------------------------------------

def _simulate(cfg: ScenarioConfig, out: Path, args):
    sim = replace(cfg.sim, record_trajectory=True)
    res = sample_path(cfg.x0, cfg.control.fixed_u, cfg.model, cfg.noise, cfg.domain, sim,
                      path_index=args.path_index)
    print(f"path {args.path_index}: exit_time={res.exit_time!r} face={res.exit_face}")
    return {"trajectory.csv": csvio.write_trajectory(res, out / "trajectory.csv")}


def _ensemble(cfg: ScenarioConfig, args):
    return run_ensemble(cfg.x0, cfg.control.fixed_u, cfg.model, cfg.noise, cfg.domain,
                        cfg.sim, args.workers)


def _survival(cfg, out, args):
    sample = _ensemble(cfg, args)
    if sample.censored_count == sample.n_paths:
        raise AllCensoredError(sample.censored_count)
    curve = survival_from_sample(sample, cfg.sim.n_curve)
    try:
        rate = fit_exit_rate(curve, cfg.fit_window)
    except ValueError as exc:
        raise NumericalFailure(str(exc)) from exc
    summary = {"lambda_hat": rate.lambda_hat, "stderr": rate.stderr,
               "sampling_stderr": rate.sampling_stderr,
               "combined_stderr": rate.combined_stderr, "fit_window": list(rate.fit_window),
               "r_squared": rate.r_squared, "n_points": rate.n_points,
               "n_paths": curve.n_paths, "censored_count": curve.censored_count}
    print(f"lambda_hat={rate.lambda_hat:.6g} +/- {rate.combined_stderr:.2g}")
    return {"survival.csv": csvio.write_survival(curve, out / "survival.csv"),
            "rate_estimate.json": csvio.write_json(summary, out / "rate_estimate.json")}


def _meantime(cfg, out, args):
    m = mean_exit_from_sample(_ensemble(cfg, args))
    summary = {"mean": m.mean, "stderr": m.stderr, "censored_count": m.censored_count,
               "n_paths": m.n_paths}
    print(f"mean exit time={m.mean:.6g} +/- {m.stderr:.2g} (censored {m.censored_count})")
    return {"mean_exit_time.json": csvio.write_json(summary, out / "mean_exit_time.json")}


def _eigen(cfg, out, args):
    g = build_grid(cfg.domain, cfg.grid)
    op = assemble(g, cfg.model, cfg.noise, cfg.control.fixed_u)
    e = principal_eigenpair(op, cfg.tolerances.solver_tol, cfg.tolerances.max_iter,
                            require_positive=not args.allow_nonpositive)
    print(f"lambda={e.lam!r} iterations={e.iterations} residual={e.residual_norm:.2e}")
    files = {"eigenpair.csv": csvio.write_eigenpair(e, g, out / "eigenpair.csv")}
    if args.dump_operator:
        files["operator.csv"] = csvio.write_operator(op, out / "operator.csv")
    return files


def _solve(cfg: ScenarioConfig, args):
    t = cfg.tolerances
    return policy_iteration(build_grid(cfg.domain, cfg.grid), cfg.model, cfg.noise,
                            cfg.control.bounds, tol_lambda=t.tol_lambda, max_outer=t.max_outer,
                            eig_tol=t.solver_tol, max_iter=t.max_iter,
                            require_positive=not args.allow_nonpositive,
                            scheme=cfg.control.scheme)


def _optimize(cfg, out, args):
    sol = _solve(cfg, args)
    print(f"lambda_star={sol.lambda_star!r} outer_iterations={sol.iterations} "
          f"converged={sol.converged}")
    files = {"optimal_solution.csv": csvio.write_solution(sol, out / "optimal_solution.csv"),
             "lambda_history.csv": csvio.write_lambda_history(sol, out / "lambda_history.csv")}
    if not sol.converged:
        raise NumericalFailure(f"policy iteration did not converge in {cfg.tolerances.max_outer} "
                               "outer iterations", files)
    return files


def _verify(cfg, out, args):
    sol_path, hist_path = out / "optimal_solution.csv", out / "lambda_history.csv"
    files = {}
    if sol_path.exists() and hist_path.exists():
        sol = csvio.read_solution(sol_path, hist_path, build_grid(cfg.domain, cfg.grid))
        print(f"loaded {sol_path}")
    else:
        files = _optimize(cfg, out, args)
        sol = csvio.read_solution(sol_path, hist_path, build_grid(cfg.domain, cfg.grid))
    t = cfg.tolerances
    rep = verify_solution(sol, cfg.model, cfg.noise, cfg.control.bounds, cfg.sim, cfg.x0,
                          t.rate_tolerance_multiplier, t.disc_allowance, t.solver_tol,
                          args.workers, cfg.fit_window)
    files["verification_report.txt"] = csvio.write_report(rep, out / "verification_report.txt")
    sys.stdout.write(rep.to_text())
    return files, (EXIT_OK if rep.overall else EXIT_VERIFY)


def _risk(cfg, out, args):
    sim = replace(cfg.sim, eps_noise=cfg.risk.eps_noise)
    sample = run_ensemble(cfg.x0, cfg.control.fixed_u, cfg.model, cfg.noise, cfg.domain, sim,
                          args.workers)
    rows = []
    for th in cfg.risk.thetas:
        rc = RiskConfig(th, cfg.risk.eps_noise)
        r = risk_value_from_sample(sample, rc.theta, rc.eps_noise)
        rows.append((r.theta, r.eps_noise, r.value, r.stderr, r.value / r.theta,
                     r.censored_count, r.n_paths))
        print(f"theta={th!r} value={r.value:.6g} value/theta={r.value / th:.6g}")
    return {"risk.csv": csvio.write_risk_table(rows, out / "risk.csv")}


_HANDLERS = {"simulate": _simulate, "survival": _survival, "meantime": _meantime,
             "eigen": _eigen, "optimize": _optimize, "verify": _verify, "risk": _risk}


def write_manifest(cfg: ScenarioConfig, command: str, out: Path, files: dict, status: int) -> Path:
    """Deterministic record of what produced ``files``: no timestamps or hostnames."""
    entry = {
        "command": command,
        "exit_status": status,
        "config_sha256": cfg.sha256(),
        "seed": cfg.sim.seed,
        "n_paths": cfg.sim.n_paths,
        "package": "artifact",
        "package_version": package_version(),
        "files": {name: {"sha256": csvio.sha256_file(p)} for name, p in sorted(files.items())},
    }
    return csvio.write_json(entry, out / f"manifest_{command}.json")


def dispatch(command: str, cfg: ScenarioConfig, args) -> int:
    """Run one subcommand; the returned integer is the process exit status."""
    if command == "validate":
        print(f"configuration valid (sha256 {cfg.sha256()})")
        return EXIT_OK
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    try:
        result = _HANDLERS[command](cfg, out, args)
    except NumericalFailure as exc:
        msg, *rest = exc.args
        print(f"numerical failure: {msg}", file=sys.stderr)
        if rest:
            write_manifest(cfg, command, out, rest[0], EXIT_NUMERIC)
        return EXIT_NUMERIC
    except (EigenSolveError, AllCensoredError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if isinstance(result, tuple):
        result, status = result
    write_manifest(cfg, command, out, result, status)
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="exitrate",
        description="Exit rates and rate-minimizing controls for a stochastic opioid-epidemic model.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="subcommand")
    helps = {
        "validate": "check the configuration and exit",
        "simulate": "write one trajectory (trajectory.csv)",
        "survival": "survival curve and fitted exit rate",
        "meantime": "mean exit time",
        "eigen": "principal eigenpair under the fixed control",
        "optimize": "rate-minimizing bang-bang policy by policy iteration",
        "verify": "check an optimal solution, including a Monte Carlo cross-check",
        "risk": "risk-sensitive escape value for each configured theta",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="scenario JSON file")
        p.add_argument("--seed", type=int, help="override sim.seed")
        p.add_argument("--n-paths", type=int, help="override sim.n_paths")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("--workers", type=int, default=1, help="threads for Monte Carlo")
        if name == "simulate":
            p.add_argument("--path-index", type=int, default=0)
        if name == "eigen":
            p.add_argument("--dump-operator", action="store_true",
                           help="also write operator.csv (row,col,value)")
        if name in ("eigen", "optimize", "verify"):
            p.add_argument("--allow-nonpositive", action="store_true",
                           help="skip the strict eigenvector positivity check")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(args.seed, args.n_paths, args.out)
        if args.workers < 1:
            raise ConfigError([f"--workers={args.workers}: requires >= 1"])
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return dispatch(args.command, cfg, args)


if __name__ == "__main__":
    sys.exit(main())
