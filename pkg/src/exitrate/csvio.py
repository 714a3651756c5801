"""CSV and text emitters.  Floats are written with ``repr`` so files round-trip
exactly and are byte-stable for fixed inputs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .control import OptimalSolution, Policy, VerificationReport
from .operator import EigenPair, Grid, SparseOperator
from .simulate import PathResult, SurvivalCurve


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_rows(path: Path, header: str, rows, comments=()) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _read_rows(path: Path):
    meta, rows, header = {}, [], None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
            elif header is None:
                header = line.split(",")
            elif line:
                rows.append([float(v) for v in line.split(",")])
    return meta, header, np.asarray(rows, dtype=np.float64)


def write_survival(curve: SurvivalCurve, path) -> Path:
    rows = zip(curve.times, curve.survivors, curve.p_hat, curve.ci_lo, curve.ci_hi)
    return _write_rows(path, "t,survivors,p_hat,ci_lo,ci_hi", rows)


def write_trajectory(result: PathResult, path) -> Path:
    if result.trajectory is None:
        raise ValueError("path was simulated without record_trajectory")
    return _write_rows(path, "t,x1,x2,x3", result.trajectory)


def write_eigenpair(e: EigenPair, grid: Grid, path) -> Path:
    pts = grid.all_points()
    psi = e.psi_full(grid).ravel(order="F")
    rows = (tuple(x) + (v,) for x, v in zip(pts, psi))
    return _write_rows(path, "x1,x2,x3,psi", rows,
                       [f"lambda={e.lam!r}", f"iterations={e.iterations}",
                        f"residual_norm={e.residual_norm!r}"])


def write_operator(op: SparseOperator, path) -> Path:
    r, c, v = op.triplets()
    return _write_rows(path, "row,col,value", zip(r, c, v))


def write_solution(sol: OptimalSolution, path) -> Path:
    g = sol.policy_star.grid
    pts = g.all_points()
    psi = sol.psi_star.psi_full(g).ravel(order="F")
    u = sol.policy_star.full_values().ravel(order="F")
    rows = (tuple(x) + (a, b) for x, a, b in zip(pts, psi, u))
    return _write_rows(path, "x1,x2,x3,psi,u", rows, [
        f"lambda_star={sol.lambda_star!r}", f"iterations={sol.iterations}",
        f"converged={sol.converged}", f"scheme={sol.scheme}",
        f"eigen_iterations={sol.psi_star.iterations}",
        f"residual_norm={sol.psi_star.residual_norm!r}"])


def write_lambda_history(sol: OptimalSolution, path) -> Path:
    return _write_rows(path, "iteration,lambda", enumerate(sol.lambda_history, start=1))


def read_solution(path, history_path, grid: Grid) -> OptimalSolution:
    """Inverse of :func:`write_solution` plus :func:`write_lambda_history`."""
    meta, header, data = _read_rows(path)
    if header != ["x1", "x2", "x3", "psi", "u"] or len(data) != int(np.prod(grid.n)):
        raise ValueError(f"{path} does not hold a solution on a {grid.n} grid")
    if not np.allclose(data[:, :3], grid.all_points(), rtol=0, atol=1e-12):
        raise ValueError(f"{path} node coordinates do not match the configured grid")
    psi = grid.to_interior(data[:, 3].reshape(grid.n, order="F"))
    u = grid.to_interior(data[:, 4].reshape(grid.n, order="F"))
    lam = float(meta["lambda_star"])
    eig = EigenPair(lam, psi, int(meta["eigen_iterations"]), float(meta["residual_norm"]))
    _, _, hist = _read_rows(history_path)
    return OptimalSolution(lam, eig, Policy(grid, u), tuple(hist[:, 1].tolist()),
                           int(meta["iterations"]), meta["converged"] == "True", meta["scheme"])


def write_risk_table(rows, path) -> Path:
    return _write_rows(path, "theta,eps_noise,value,stderr,value_over_theta,censored,n_paths",
                       rows)


def write_report(report: VerificationReport, path) -> Path:
    path = Path(path)
    path.write_text(report.to_text())
    return path


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
