"""Euler-Maruyama paths of the controlled degenerate SDE and exit-time estimators.

Noise and control enter the ``x1`` (susceptible) increment only; ``x2`` and
``x3`` evolve by drift.  A path exits at the first step whose endpoint leaves
the open box; there is no Brownian-bridge correction, so exit times carry an
``O(sqrt(dt))`` bias from discrete monitoring.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numba as nb
import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .model import (Domain, ModelParams, NoiseSpec, State3, drift_kernel_jit,
                    eval_noise, noise_kernel_jit, reduced_drift)
from .rng import normal_pair

FACES = ("x1_lo", "x1_hi", "x2_lo", "x2_hi", "x3_lo", "x3_hi")
_Z95 = 1.96


class PreconditionError(ValueError):
    pass


class AllCensoredError(RuntimeError):
    def __init__(self, censored_count: int):
        self.censored_count = censored_count
        super().__init__(f"all {censored_count} paths censored; increase t_max")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_max: float = 5.0
    n_paths: int = 1000
    seed: int = 0
    record_trajectory: bool = False
    eps_noise: float = 1.0
    n_curve: int = 200  # survival-curve intervals on [0, t_max]

    def __post_init__(self):
        bad = []
        if not self.dt > 0:
            bad.append("dt > 0")
        if not self.t_max >= self.dt:
            bad.append("t_max >= dt")
        if self.n_paths < 1:
            bad.append("n_paths >= 1")
        if not self.eps_noise > 0:
            bad.append("eps_noise > 0")
        if not 0 <= self.seed < 2**64:
            bad.append("0 <= seed < 2**64")
        if self.n_curve < 1:
            bad.append("n_curve >= 1")
        if bad:
            raise ValueError("invalid SimConfig: " + ", ".join(bad))

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.t_max / self.dt + 1e-9))


@dataclass(frozen=True)
class RiskConfig:
    theta: float = 0.01
    eps_noise: float = 1.0

    def __post_init__(self):
        if not (self.theta > 0 and self.eps_noise > 0):
            raise ValueError("RiskConfig requires theta > 0 and eps_noise > 0")


@dataclass(frozen=True)
class PathResult:
    exit_time: float
    exit_face: Optional[str]
    final_state: State3
    trajectory: Optional[np.ndarray] = None  # rows (t, x1, x2, x3)

    @property
    def censored(self) -> bool:
        return self.exit_face is None


@dataclass(frozen=True)
class ExitSample:
    """Raw ensemble output; every estimator below reduces one of these."""

    exit_times: np.ndarray
    censored: np.ndarray
    faces: np.ndarray
    t_max: float

    @property
    def n_paths(self) -> int:
        return len(self.exit_times)

    @property
    def censored_count(self) -> int:
        return int(self.censored.sum())


@dataclass(frozen=True)
class SurvivalCurve:
    times: np.ndarray
    survivors: np.ndarray
    p_hat: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_paths: int
    censored_count: int


@dataclass(frozen=True)
class RateEstimate:
    lambda_hat: float
    stderr: float  # from regression residuals
    fit_window: tuple[float, float]
    r_squared: float
    n_points: int
    sampling_stderr: float = float("nan")

    @property
    def combined_stderr(self) -> float:
        """Larger of the residual and binomial-sampling standard errors."""
        return float(np.nanmax([self.stderr, self.sampling_stderr]))


@dataclass(frozen=True)
class MeanExitTime:
    mean: float
    stderr: float
    censored_count: int
    n_paths: int


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    stderr: float
    theta: float
    eps_noise: float
    censored_count: int
    n_paths: int


# --------------------------------------------------------------------------
# single step
# --------------------------------------------------------------------------

def step(x, u, p: ModelParams, n: NoiseSpec, dt: float, dw, eps_noise: float = 1.0):
    """One Euler-Maruyama step; ``x`` is a :class:`State3` or ``(..., 3)`` array."""
    as_state = isinstance(x, State3)
    xa = x.as_array() if as_state else np.asarray(x, dtype=np.float64)
    f = reduced_drift(xa, p)
    s = eval_noise(xa, n)
    out = xa + f * dt
    out[..., 0] = xa[..., 0] + (f[..., 0] + u) * dt + (math.sqrt(eps_noise) * s) * dw
    return State3(*out) if as_state else out


# --------------------------------------------------------------------------
# compiled path kernel
# --------------------------------------------------------------------------

@nb.njit(nogil=True, cache=True)
def _interp_policy(x1, x2, x3, pol, plo, ph):
    xs = (x1, x2, x3)
    idx = np.empty(3, dtype=np.int64)
    frac = np.empty(3)
    for a in range(3):
        m = pol.shape[a]
        t = (xs[a] - plo[a]) / ph[a]
        if t < 0.0:
            t = 0.0
        elif t > m - 1:
            t = m - 1.0
        i = int(math.floor(t))
        if i > m - 2:
            i = m - 2
        idx[a] = i
        frac[a] = t - i
    i, j, k = idx[0], idx[1], idx[2]
    a, b, c = frac[0], frac[1], frac[2]
    v = 0.0
    for di in range(2):
        wa = a if di else 1.0 - a
        for dj in range(2):
            wb = b if dj else 1.0 - b
            for dk in range(2):
                wc = c if dk else 1.0 - c
                v += wa * wb * wc * pol[i + di, j + dj, k + dk]
    return v


@nb.njit(nogil=True, cache=True)
def _exit_face(x1, x2, x3, lo, hi):
    xs = (x1, x2, x3)
    face = -1
    worst = 0.0
    for a in range(3):
        w = hi[a] - lo[a]
        if xs[a] <= lo[a]:
            over = (lo[a] - xs[a]) / w
            if face < 0 or over > worst:
                face, worst = 2 * a, over
        elif xs[a] >= hi[a]:
            over = (xs[a] - hi[a]) / w
            if face < 0 or over > worst:
                face, worst = 2 * a + 1, over
    return face


@nb.njit(nogil=True, cache=True)
def _advance(x0, seed, path_index, n_steps, dt, noise_scale, coef, nkind, s0, smin,
             smax, lo, hi, u_const, pol, plo, ph, traj):
    x1, x2, x3 = x0[0], x0[1], x0[2]
    sqdt = math.sqrt(dt)
    use_pol = pol.shape[0] > 0
    record = traj.shape[0] > 0
    if record:
        traj[0, 0] = 0.0
        traj[0, 1] = x1
        traj[0, 2] = x2
        traj[0, 3] = x3
    z_odd = 0.0
    for k in range(n_steps):
        if (k & 1) == 0:
            z, z_odd = normal_pair(seed, path_index, k >> 1)
        else:
            z = z_odd
        f1, f2, f3 = drift_kernel_jit(x1, x2, x3, coef)
        u = _interp_policy(x1, x2, x3, pol, plo, ph) if use_pol else u_const
        s = noise_kernel_jit(x1, nkind, s0, smin, smax)
        dw = sqdt * z
        x1, x2, x3 = (x1 + (f1 + u) * dt + (noise_scale * s) * dw,
                      x2 + f2 * dt, x3 + f3 * dt)
        if record:
            traj[k + 1, 0] = (k + 1) * dt
            traj[k + 1, 1] = x1
            traj[k + 1, 2] = x2
            traj[k + 1, 3] = x3
        face = _exit_face(x1, x2, x3, lo, hi)
        if face >= 0:
            return k + 1, face, x1, x2, x3
    return -1, -1, x1, x2, x3


@nb.njit(nogil=True, cache=True)
def _run_batch(paths, x0, seed, n_steps, dt, noise_scale, coef, nkind, s0, smin, smax,
               lo, hi, u_const, pol, plo, ph, steps_out, faces_out):
    no_traj = np.empty((0, 4))
    for m in range(paths.shape[0]):
        k, face, _, _, _ = _advance(x0, seed, paths[m], n_steps, dt, noise_scale, coef,
                                    nkind, s0, smin, smax, lo, hi, u_const, pol, plo,
                                    ph, no_traj)
        steps_out[m] = k
        faces_out[m] = face


_NO_POLICY = np.empty((0, 0, 0))
_ZERO3 = np.zeros(3)


def _policy_args(policy):
    """Constant control, or any object exposing ``interpolation_table()``."""
    if hasattr(policy, "interpolation_table"):
        table, lo, h = policy.interpolation_table()
        return 0.0, np.ascontiguousarray(table, dtype=np.float64), np.asarray(lo, float), np.asarray(h, float)
    return float(policy), _NO_POLICY, _ZERO3, np.ones(3)


def _kernel_args(x0, policy, p, n, d, cfg):
    x0a = x0.as_array() if isinstance(x0, State3) else np.asarray(x0, dtype=np.float64)
    if not d.contains(x0a):
        raise PreconditionError(f"x0={tuple(x0a)} is not strictly inside the domain")
    u_const, pol, plo, ph = _policy_args(policy)
    return dict(
        x0=x0a, seed=np.uint64(cfg.seed), n_steps=cfg.n_steps, dt=float(cfg.dt),
        noise_scale=math.sqrt(cfg.eps_noise), coef=p.as_array(), nkind=n.kind_code,
        s0=float(n.sigma0), smin=float(n.sigma_min), smax=float(n.sigma_max),
        lo=np.asarray(d.lo), hi=np.asarray(d.hi), u_const=u_const, pol=pol, plo=plo, ph=ph,
    )


def sample_path(x0, policy, p: ModelParams, n: NoiseSpec, d: Domain, cfg: SimConfig,
                path_index: int = 0) -> PathResult:
    """Simulate path ``path_index`` of the ensemble defined by ``cfg.seed``."""
    kw = _kernel_args(x0, policy, p, n, d, cfg)
    traj = np.empty((cfg.n_steps + 1 if cfg.record_trajectory else 0, 4))
    k, face, x1, x2, x3 = _advance(path_index=np.uint64(path_index), traj=traj, **kw)
    if k < 0:
        t_exit, face_name, used = cfg.t_max, None, cfg.n_steps
    else:
        t_exit, face_name, used = k * cfg.dt, FACES[face], k
    return PathResult(t_exit, face_name, State3(x1, x2, x3),
                      traj[: used + 1].copy() if cfg.record_trajectory else None)


def run_ensemble(x0, policy, p: ModelParams, n: NoiseSpec, d: Domain, cfg: SimConfig,
                 workers: int = 1) -> ExitSample:
    """Simulate ``cfg.n_paths`` paths, split over ``workers`` threads.

    Path ``i`` only ever consumes the random stream keyed by ``(seed, i)``, so
    the result does not depend on ``workers``.
    """
    kw = _kernel_args(x0, policy, p, n, d, cfg)
    x0a = kw.pop("x0")
    paths = np.arange(cfg.n_paths, dtype=np.uint64)
    steps = np.empty(cfg.n_paths, dtype=np.int64)
    faces = np.empty(cfg.n_paths, dtype=np.int64)
    workers = max(1, min(int(workers), cfg.n_paths))
    chunks = np.array_split(np.arange(cfg.n_paths), workers)

    def job(ix):
        if len(ix):
            sl = slice(ix[0], ix[-1] + 1)
            _run_batch(paths[sl], x0a, kw["seed"], kw["n_steps"], kw["dt"], kw["noise_scale"],
                       kw["coef"], kw["nkind"], kw["s0"], kw["smin"], kw["smax"], kw["lo"],
                       kw["hi"], kw["u_const"], kw["pol"], kw["plo"], kw["ph"],
                       steps[sl], faces[sl])

    if workers == 1:
        job(chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(job, chunks))
    censored = steps < 0
    times = np.where(censored, cfg.t_max, steps * cfg.dt)
    return ExitSample(times, censored, faces, cfg.t_max)


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------

def survival_from_sample(sample: ExitSample, n_curve: int = 200) -> SurvivalCurve:
    times = np.linspace(0.0, sample.t_max, n_curve + 1)
    ends = np.sort(np.where(sample.censored, np.inf, sample.exit_times))
    n = sample.n_paths
    survivors = n - np.searchsorted(ends, times, side="right")
    p_hat = survivors / n
    half = _Z95 * np.sqrt(p_hat * (1.0 - p_hat) / n)
    return SurvivalCurve(times, survivors, p_hat, np.clip(p_hat - half, 0.0, 1.0),
                         np.clip(p_hat + half, 0.0, 1.0), n, sample.censored_count)


def estimate_survival(x0, policy, p, n, d, cfg: SimConfig, workers: int = 1) -> SurvivalCurve:
    """Empirical ``P{tau > t}`` on ``cfg.n_curve + 1`` equally spaced times."""
    return survival_from_sample(run_ensemble(x0, policy, p, n, d, cfg, workers), cfg.n_curve)


def default_fit_window(curve: SurvivalCurve) -> tuple[float, float]:
    """Second half of the horizon, cut where fewer than ``max(10, n/1000)`` survive."""
    t_lo = curve.times[-1] / 2.0
    floor = max(10.0, curve.n_paths / 1000.0)
    ok = np.nonzero(curve.survivors >= floor)[0]
    t_hi = curve.times[ok[-1]] if len(ok) else curve.times[0]
    return float(t_lo), float(t_hi)


def _sampling_stderr(t: np.ndarray, p: np.ndarray, n_paths: int) -> float:
    """Slope stderr under the binomial covariance of an empirical survival curve.

    For ``s <= t``, ``Cov(log p(s), log p(t)) ~ (1 - p(s)) / (n p(s))``, so
    the covariance matrix is ``c[min(i, j)]`` with ``c`` nondecreasing and
    ``w' C w = sum_k (c_k - c_{k-1}) * (sum_{i >= k} w_i)**2``.
    """
    w = (t - t.mean()) / np.sum((t - t.mean()) ** 2)
    c = (1.0 - p) / (n_paths * p)
    tail = np.cumsum(w[::-1])[::-1]
    dc = np.diff(np.concatenate([[0.0], c]))
    return float(math.sqrt(max(np.sum(dc * tail ** 2), 0.0)))


def fit_exit_rate(curve: SurvivalCurve, window: Optional[tuple[float, float]] = None) -> RateEstimate:
    """Least-squares slope of ``-log p_hat`` against ``t`` over ``window``.

    ``stderr`` comes from the regression residuals.  Those residuals are
    strongly correlated along a survival curve, so ``sampling_stderr`` (the
    binomial sampling error of the same slope) is reported alongside.
    """
    if window is None:
        window = default_fit_window(curve)
    t_lo, t_hi = window
    tol = 1e-12 * max(1.0, abs(t_hi))
    sel = (curve.times >= t_lo - tol) & (curve.times <= t_hi + tol) & (curve.p_hat > 0)
    if sel.sum() < 2:
        raise ValueError(f"fit window {window} has fewer than 2 points with p_hat > 0")
    t = curve.times[sel]
    y = -np.log(curve.p_hat[sel])
    fit = stats.linregress(t, y)
    r2 = float(fit.rvalue ** 2) if np.isfinite(fit.rvalue) else 1.0
    # linregress derives stderr from 1 - r**2, which cancels on near-exact fits
    resid = y - (fit.intercept + fit.slope * t)
    df = len(t) - 2
    stderr = math.sqrt(resid @ resid / df / np.sum((t - t.mean()) ** 2)) if df > 0 else 0.0
    return RateEstimate(float(fit.slope), stderr, (float(t_lo), float(t_hi)), r2,
                        int(sel.sum()), _sampling_stderr(t, curve.p_hat[sel], curve.n_paths))


def mean_exit_from_sample(sample: ExitSample) -> MeanExitTime:
    done = sample.exit_times[~sample.censored]
    if len(done) == 0:
        raise AllCensoredError(sample.censored_count)
    se = float(np.std(done, ddof=1) / math.sqrt(len(done))) if len(done) > 1 else float("nan")
    return MeanExitTime(float(done.mean()), se, sample.censored_count, sample.n_paths)


def estimate_mean_exit_time(x0, policy, p, n, d, cfg: SimConfig, workers: int = 1) -> MeanExitTime:
    """Sample mean over uncensored paths; ``censored_count`` flags truncation bias."""
    return mean_exit_from_sample(run_ensemble(x0, policy, p, n, d, cfg, workers))


def risk_value_from_sample(sample: ExitSample, theta: float, eps_noise: float) -> RiskEstimate:
    """``-eps * log mean(exp(-theta * tau / eps))``; censored paths use ``t_max``.

    Treating a censored path as exiting at ``t_max`` understates its ``tau``,
    so the value is biased upward only through those paths.
    """
    tau = sample.exit_times
    n = len(tau)
    logw = -theta * tau / eps_noise
    log_m = logsumexp(logw) - math.log(n)
    value = -eps_noise * log_m
    if theta == 0.0 or n < 2:
        se = 0.0
    else:
        w = np.exp(logw - log_m)  # weights relative to their mean
        se = eps_noise * float(np.std(w, ddof=1)) / math.sqrt(n)
    return RiskEstimate(float(value) + 0.0, se, theta, eps_noise, sample.censored_count, n)


def estimate_risk_sensitive(x0, policy, p, n, d, cfg: SimConfig, rc: RiskConfig,
                            workers: int = 1) -> RiskEstimate:
    """Risk-sensitive escape value; path noise is scaled by ``sqrt(rc.eps_noise)``."""
    cfg = replace(cfg, eps_noise=rc.eps_noise)
    return risk_value_from_sample(run_ensemble(x0, policy, p, n, d, cfg, workers),
                                  rc.theta, rc.eps_noise)
