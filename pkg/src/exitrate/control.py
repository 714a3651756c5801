"""Bang-bang policy improvement, policy iteration and solution verification.

The control enters the generator only through ``u * d/dx1``, so with
``u`` confined to ``[u_min, u_max]`` the pointwise maximizer sits at a
bound, chosen by the sign of ``d psi / d x1``.  Ties go to ``u = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ModelParams, NoiseSpec, reduced_drift
from .operator import (EigenPair, Grid, assemble, principal_eigenpair, residual,
                       residual_tolerance)
from .simulate import AllCensoredError, SimConfig, estimate_survival, fit_exit_rate

log = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-10


@dataclass(frozen=True)
class ControlBounds:
    u_min: float = 0.0
    u_max: float = 0.0
    tie_tolerance: float = 0.0

    def __post_init__(self):
        if not self.u_min <= self.u_max:
            raise ValueError(f"u_min={self.u_min} exceeds u_max={self.u_max}")
        if not self.tie_tolerance >= 0:
            raise ValueError("tie_tolerance must be >= 0")

    @property
    def neutral(self) -> float:
        """Control used at ties: 0 when admissible, else the nearer bound."""
        return float(min(max(0.0, self.u_min), self.u_max))


@dataclass(frozen=True, eq=False)
class Policy:
    """Control value at every interior node of ``grid``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.size,):
            raise ValueError(f"policy needs {self.grid.size} values, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: Grid, u: float) -> "Policy":
        return cls(grid, np.full(grid.size, float(u)))

    def same_as(self, other: "Policy") -> bool:
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def full_values(self) -> np.ndarray:
        """Values on the full grid; boundary nodes copy their nearest interior node."""
        inner = self.values.reshape(self.grid.m, order="F")
        return np.pad(inner, 1, mode="edge")

    def interpolation_table(self):
        g = self.grid
        return self.full_values(), np.asarray(g.domain.lo), g.h


@dataclass(frozen=True)
class OptimalSolution:
    lambda_star: float
    psi_star: EigenPair
    policy_star: Policy
    lambda_history: tuple[float, ...]
    iterations: int
    converged: bool = True
    scheme: str = "upwind"


def x1_gradient(g: Grid, psi_full: np.ndarray) -> np.ndarray:
    """d psi / d x1 at interior nodes (interior-vector order).

    Central differences between interior nodes; one-sided at the nodes next
    to the x1 faces.
    """
    inner = np.asarray(psi_full, dtype=np.float64)[1:-1, 1:-1, 1:-1]
    if inner.shape[0] < 2:
        grad = np.zeros_like(inner)
    else:
        grad = np.gradient(inner, g.h[0], axis=0, edge_order=1)
    return grad.ravel(order="F")


def upwind_hamiltonians(g: Grid, psi_full: np.ndarray, drift_x1: np.ndarray,
                        candidates) -> np.ndarray:
    """``(f1 + u) * D psi`` per candidate ``u``, rows of the result.

    ``D`` is the one-sided x1 difference the upwind operator uses for that
    ``u``, so maximizing this row-wise minimizes ``(A_u psi)_j``.
    """
    psi_full = np.asarray(psi_full, dtype=np.float64)
    h1 = g.h[0]
    fwd = ((psi_full[2:, 1:-1, 1:-1] - psi_full[1:-1, 1:-1, 1:-1]) / h1).ravel(order="F")
    bwd = ((psi_full[1:-1, 1:-1, 1:-1] - psi_full[:-2, 1:-1, 1:-1]) / h1).ravel(order="F")
    out = np.empty((len(candidates), g.size))
    for k, u in enumerate(candidates):
        bvel = drift_x1 + u
        out[k] = bvel * np.where(bvel > 0, fwd, bwd)
    return out


def _select(g: Grid, psi_full: np.ndarray, b: ControlBounds, scheme: str,
            drift_x1: Optional[np.ndarray]):
    """Chosen controls and a mask of nodes where the choice is not a tie."""
    if scheme == "central":
        grad = x1_gradient(g, psi_full)
        u = np.full(g.size, b.neutral)
        u[grad > b.tie_tolerance] = b.u_max
        u[grad < -b.tie_tolerance] = b.u_min
        return u, np.abs(grad) > b.tie_tolerance
    if scheme != "upwind":
        raise ValueError(f"unknown selector scheme {scheme!r}")
    if drift_x1 is None:
        raise ValueError("the upwind selector needs the x1 drift at interior nodes")
    cands = np.array([b.neutral, b.u_max, b.u_min])
    H = upwind_hamiltonians(g, psi_full, np.asarray(drift_x1, dtype=np.float64), cands)
    # rounding slack so that exact ties stay ties
    slack = b.tie_tolerance + 1e-12 * (np.max(np.abs(H), axis=0) + 1e-300)
    best = H.max(axis=0)
    pick = np.where(H[1] >= H[2], 1, 2)
    pick = np.where(H[0] >= best - slack, 0, pick)
    u = cands[pick]
    chosen = H[pick, np.arange(g.size)]
    rivals = np.where(cands[:, None] == u[None, :], -np.inf, H)
    active = chosen - rivals.max(axis=0) > slack
    return u, active


def improve_policy(g: Grid, psi, b: ControlBounds, scheme: str = "central",
                   drift_x1: Optional[np.ndarray] = None) -> Policy:
    """Pointwise maximizer of ``u * d psi/d x1`` over ``[u_min, u_max]``.

    ``psi`` is a full-grid array (zero on the boundary) or an interior vector.

    ``scheme="central"`` takes the sign of the central-difference gradient:
    ``u_max`` above ``tie_tolerance``, ``u_min`` below ``-tie_tolerance``,
    and the neutral control in between.

    ``scheme="upwind"`` compares ``u_min``, the neutral control and ``u_max``
    through the same one-sided differences the assembled operator applies
    (``drift_x1`` required).  Each step then cannot raise the principal
    eigenvalue.  The neutral control wins whenever it is within
    ``tie_tolerance`` of the best candidate.
    """
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim == 1:
        psi = g.to_full(psi)
    if psi.shape != g.n:
        raise ValueError(f"psi has shape {psi.shape}, grid is {g.n}")
    edge = psi.copy()
    edge[1:-1, 1:-1, 1:-1] = 0.0
    if np.any(edge != 0.0):
        raise ValueError("psi must vanish on the boundary")
    u, _ = _select(g, psi, b, scheme, drift_x1)
    return Policy(g, u)


def x1_drift_on_grid(g: Grid, p: ModelParams) -> np.ndarray:
    return reduced_drift(g.interior_points(), p)[:, 0]


def policy_iteration(g: Grid, p: ModelParams, n: NoiseSpec, b: ControlBounds,
                     initial: Optional[Policy] = None, tol_lambda: float = 1e-10,
                     max_outer: int = 50, eig_tol: float = 1e-10, max_iter: int = 10_000,
                     require_positive: bool = True, scheme: str = "upwind") -> OptimalSolution:
    """Howard iteration: evaluate the principal pair, then improve the policy.

    Stops when the policy is a fixed point of :func:`improve_policy` and
    ``lambda`` moved by at most ``tol_lambda`` (relative).  A policy that
    recurs while ``lambda`` stalls is also accepted.  If ``max_outer``
    evaluations pass without that, the best evaluated policy is returned
    with ``converged=False``.
    """
    drift_x1 = x1_drift_on_grid(g, p) if scheme == "upwind" else None
    policy = initial if initial is not None else Policy.constant(g, b.neutral)
    history: list[float] = []
    seen: set[bytes] = set()
    best = None
    for k in range(1, max_outer + 1):
        eig = principal_eigenpair(assemble(g, p, n, policy), eig_tol, max_iter, require_positive)
        history.append(eig.lam)
        if best is None or eig.lam < best[0]:
            best = (eig.lam, eig, policy)
        log.debug("outer %d: lambda = %.12g", k, eig.lam)
        new = improve_policy(g, eig.psi_full(g), b, scheme, drift_x1)
        stalled = len(history) == 1 or abs(history[-1] - history[-2]) <= tol_lambda * history[-2]
        if new.same_as(policy) or (stalled and new.values.tobytes() in seen):
            return OptimalSolution(eig.lam, eig, policy, tuple(history), k, True, scheme)
        seen.add(policy.values.tobytes())
        policy = new
    lam, eig, pol = best
    log.warning("policy iteration did not converge in %d outer iterations", max_outer)
    return OptimalSolution(lam, eig, pol, tuple(history), max_outer, False, scheme)


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    measured: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class VerificationReport:
    argmax_check: Check
    residual_check: Check
    monotonicity_check: Check
    mc_crosscheck: Check
    lambda_pde: float = float("nan")
    lambda_mc: float = float("nan")
    mc_ci: tuple[float, float] = (float("nan"), float("nan"))

    @property
    def checks(self) -> tuple[Check, ...]:
        return (self.argmax_check, self.residual_check, self.monotonicity_check,
                self.mc_crosscheck)

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_text(self) -> str:
        lines = ["check\tmeasured\tthreshold\tstatus\tdetail"]
        for c in self.checks:
            lines.append(f"{c.name}\t{c.measured!r}\t{c.threshold!r}\t"
                         f"{'pass' if c.passed else 'fail'}\t{c.detail}")
        lines.append(f"overall\t\t\t{'pass' if self.overall else 'fail'}\t")
        return "\n".join(lines) + "\n"


def _argmax_check(sol: OptimalSolution, p: ModelParams, b: ControlBounds) -> Check:
    g = sol.policy_star.grid
    drift_x1 = x1_drift_on_grid(g, p) if sol.scheme == "upwind" else None
    redo, active = _select(g, sol.psi_star.psi_full(g), b, sol.scheme, drift_x1)
    bad = np.nonzero(active & (redo != sol.policy_star.values))[0]
    if len(bad):
        worst = int(bad[0])
        lat = tuple(int(v) for v in np.asarray(g.lattice(worst)).ravel())
        detail = (f"worst_node={worst} lattice={lat} policy={sol.policy_star.values[worst]!r} "
                  f"argmax={redo[worst]!r} mismatches={len(bad)}")
    else:
        detail = f"non_tie_nodes={int(active.sum())} scheme={sol.scheme}"
    return Check("argmax_check", float(len(bad)), 0.0, len(bad) == 0, detail)


def verify_solution(sol: OptimalSolution, p: ModelParams, n: NoiseSpec, b: ControlBounds,
                    mc: SimConfig, x0, rate_tolerance_multiplier: float = 2.0,
                    disc_allowance: float = 0.0, solver_tol: float = 1e-10,
                    workers: int = 1, fit_window=None) -> VerificationReport:
    """Check a policy-iteration result against its own optimality conditions
    and against a Monte Carlo exit-rate estimate under ``policy_star``.

    The MC check passes when
    ``|lambda_MC - lambda_PDE| <= multiplier * (stderr + disc_allowance)``,
    where ``stderr`` is the rate fit's combined standard error and
    ``disc_allowance`` budgets the grid and time-step bias of the two
    estimates.  Failures are reported, never raised.
    """
    g = sol.policy_star.grid
    argmax = _argmax_check(sol, p, b)

    op = assemble(g, p, n, sol.policy_star)
    res = residual(op, sol.psi_star)
    res_thr = residual_tolerance(op, sol.lambda_star, solver_tol)
    residual_c = Check("residual_check", res, res_thr, res <= res_thr)

    hist = np.asarray(sol.lambda_history)
    rise = float(np.max(np.diff(hist))) if len(hist) > 1 else 0.0
    mono = Check("monotonicity_check", rise, MONOTONE_SLACK, rise <= MONOTONE_SLACK,
                 f"steps={len(hist)} converged={sol.converged}")

    try:
        curve = estimate_survival(x0, sol.policy_star, p, n, g.domain, mc, workers)
        if curve.censored_count == curve.n_paths:
            raise AllCensoredError(curve.censored_count)
        rate = fit_exit_rate(curve, fit_window)
        se = rate.combined_stderr
        diff = abs(rate.lambda_hat - sol.lambda_star)
        thr = rate_tolerance_multiplier * (se + disc_allowance)
        ci = (rate.lambda_hat - 1.96 * se, rate.lambda_hat + 1.96 * se)
        mc_c = Check("mc_crosscheck", diff, thr, bool(diff <= thr),
                     f"lambda_pde={sol.lambda_star!r} lambda_mc={rate.lambda_hat!r} "
                     f"stderr={se!r} window={rate.fit_window} "
                     f"censored={curve.censored_count}")
        lam_mc = rate.lambda_hat
    except (ValueError, RuntimeError) as exc:
        mc_c = Check("mc_crosscheck", float("nan"), disc_allowance, False, f"error: {exc}")
        lam_mc, ci = float("nan"), (float("nan"), float("nan"))
    return VerificationReport(argmax, residual_c, mono, mc_c, sol.lambda_star, lam_mc, ci)
