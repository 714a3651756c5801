"""Compartmental opioid-epidemic dynamics, noise amplitude, and box domains.

The reduced system tracks ``x = (S, A, R)``; the prescribed-user fraction is
recovered from ``P = 1 - S - A - R``.  Noise and control act on ``S`` only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numba as nb
import numpy as np


class ConservationMode(str, Enum):
    """Coefficient of the ``R*A`` outflow in the treatment equation.

    ``corrected`` uses ``nu`` so that the four rates sum to zero;
    ``paper_literal`` uses ``mu`` and leaks ``(nu - mu) * R * A``.
    """

    CORRECTED = "corrected"
    PAPER_LITERAL = "paper_literal"


class NoiseKind(str, Enum):
    CONSTANT = "constant"
    AFFINE_CLAMPED = "affine_clamped"


# positional layout of ModelParams.as_array(); shared with compiled kernels
_COEF_ORDER = (
    "alpha", "beta", "xi", "epsilon_rate", "delta", "mu", "mu_star",
    "gamma", "zeta", "nu", "sigma_relapse",
)
RATE_FIELDS = tuple(f for f in _COEF_ORDER if f != "xi")


@dataclass(frozen=True)
class ModelParams:
    alpha: float
    beta: float
    xi: float
    epsilon_rate: float
    delta: float
    mu: float
    mu_star: float
    gamma: float
    zeta: float
    nu: float
    sigma_relapse: float
    conservation_mode: ConservationMode = ConservationMode.CORRECTED

    def __post_init__(self):
        object.__setattr__(self, "conservation_mode", ConservationMode(self.conservation_mode))

    @property
    def treatment_outflow(self) -> float:
        """Coefficient on ``R*A`` removed from the treatment compartment."""
        if self.conservation_mode is ConservationMode.CORRECTED:
            return self.nu
        return self.mu

    def as_array(self) -> np.ndarray:
        vals = [getattr(self, k) for k in _COEF_ORDER]
        vals.append(self.treatment_outflow)
        return np.asarray(vals, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conservation_mode"] = self.conservation_mode.value
        return d

    @classmethod
    def zeros(cls, **overrides) -> "ModelParams":
        """All rates zero; handy for pure-diffusion test scenarios."""
        base = {k: 0.0 for k in _COEF_ORDER}
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class State4:
    s: float
    p: float
    a: float
    r: float


@dataclass(frozen=True)
class State3:
    x1: float
    x2: float
    x3: float

    def __iter__(self):
        return iter((self.x1, self.x2, self.x3))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.x3], dtype=np.float64)


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.CONSTANT
    sigma0: float = 0.1
    sigma_min: float = 1e-3
    sigma_max: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))

    @property
    def kind_code(self) -> int:
        return 0 if self.kind is NoiseKind.CONSTANT else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True)
class Domain:
    """Open axis-aligned box ``lo < x < hi``."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))

    @classmethod
    def unit_x1(cls, transverse: float = 1e3) -> "Domain":
        """``(0, 1)`` in x1, wide in x2 and x3."""
        return cls((0.0, -transverse, -transverse), (1.0, transverse, transverse))

    def contains(self, x: Sequence[float]) -> bool:
        return all(lo < v < hi for v, lo, hi in zip(x, self.lo, self.hi))

    @property
    def width(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class Violation:
    field: str
    value: object
    constraint: str

    def __str__(self):
        return f"{self.field}={self.value!r}: requires {self.constraint}"


class ValidationError(ValueError):
    """Raised with every violated constraint, not just the first."""

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


# --------------------------------------------------------------------------
# drift
# --------------------------------------------------------------------------

def drift_kernel(x1, x2, x3, c):
    """Reduced drift ``(f1, f2, f3)``; works on scalars or broadcastable arrays.

    ``c`` is ``ModelParams.as_array()``.  Compiled below for the path kernels.
    """
    alpha, beta, xi, eps, delta, mu, mu_star = c[0], c[1], c[2], c[3], c[4], c[5], c[6]
    gamma, zeta, nu, sig, r_out = c[7], c[8], c[9], c[10], c[11]
    p = 1.0 - x1 - x2 - x3
    f1 = (-alpha * x1 - beta * (1.0 - xi) * x1 * x2 - beta * xi * x1 * p
          + (eps + mu) * p + (delta + mu) * x3 + mu_star * x2)
    f2 = (gamma * p + sig * x3 + beta * (1.0 - xi) * x1 * x2
          + beta * xi * x1 * p + nu * x3 * x2 - (zeta + mu_star) * x2)
    f3 = zeta * x2 - r_out * x3 * x2 - (delta + sig + mu) * x3
    return f1, f2, f3


drift_kernel_jit = nb.njit(nogil=True, cache=True)(drift_kernel)


def full_drift(s: State4, p: ModelParams) -> np.ndarray:
    """Rates ``(dS, dP, dA, dR)`` of the four-compartment model."""
    S, P, A, R = s.s, s.p, s.a, s.r
    b1 = p.beta * (1.0 - p.xi)
    b2 = p.beta * p.xi
    dS = (-p.alpha * S - b1 * S * A - b2 * S * P + p.epsilon_rate * P
          + p.delta * R + p.mu * (P + R) + p.mu_star * A)
    dP = p.alpha * S - (p.epsilon_rate + p.gamma + p.mu) * P
    dA = (p.gamma * P + p.sigma_relapse * R + b1 * S * A + b2 * S * P
          + p.nu * R * A - (p.zeta + p.mu_star) * A)
    dR = p.zeta * A - p.treatment_outflow * R * A - (p.delta + p.sigma_relapse + p.mu) * R
    return np.array([dS, dP, dA, dR])


def reduced_drift(x, p: ModelParams) -> np.ndarray:
    """Drift of ``(S, A, R)`` with ``P = 1 - S - A - R`` substituted.

    ``x`` may be a :class:`State3`, a length-3 sequence, or an ``(..., 3)``
    array; the result has the same leading shape.
    """
    if isinstance(x, State3):
        x = x.as_array()
    x = np.asarray(x, dtype=np.float64)
    f1, f2, f3 = drift_kernel(x[..., 0], x[..., 1], x[..., 2], p.as_array())
    return np.stack(np.broadcast_arrays(f1, f2, f3), axis=-1)


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------

def noise_kernel(x1, kind, sigma0, smin, smax):
    if kind == 0:
        s = sigma0
    else:
        s = sigma0 * (1.0 + x1)
        if s != s:  # nan
            s = smax
    return min(max(s, smin), smax)


noise_kernel_jit = nb.njit(nogil=True, cache=True)(noise_kernel)


def eval_noise(x, n: NoiseSpec):
    """Noise amplitude at ``x`` (scalar, or array over leading axes)."""
    if isinstance(x, State3):
        x = x.as_array()
    x1 = np.asarray(x, dtype=np.float64)[..., 0]
    if n.kind is NoiseKind.CONSTANT:
        out = np.full(x1.shape, n.sigma0)
    else:
        with np.errstate(invalid="ignore", over="ignore"):
            out = n.sigma0 * (1.0 + x1)
        out = np.where(np.isnan(out), n.sigma_max, out)
    out = np.clip(out, n.sigma_min, n.sigma_max)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

def _finite(v) -> bool:
    try:
        return math.isfinite(float(v))
    except (TypeError, ValueError):
        return False


def find_violations(p: ModelParams | None = None, n: NoiseSpec | None = None,
                    d: Domain | None = None) -> list[Violation]:
    out: list[Violation] = []
    if p is not None:
        for k in RATE_FIELDS:
            v = getattr(p, k)
            if not _finite(v) or v < 0:
                out.append(Violation(f"model.{k}", v, f"{k} >= 0 and finite"))
        if not _finite(p.xi) or not 0.0 <= p.xi <= 1.0:
            out.append(Violation("model.xi", p.xi, "xi ∈ [0,1]"))
        if _finite(p.mu) and _finite(p.mu_star) and p.mu_star < p.mu:
            out.append(Violation("model.mu_star", p.mu_star, f"mu_star >= mu ({p.mu})"))
    if n is not None:
        if not _finite(n.sigma_min) or n.sigma_min <= 0:
            out.append(Violation(
                "noise.sigma_min", n.sigma_min,
                "sigma_min > 0 (noise amplitude must stay bounded away from zero "
                "so that its inverse is bounded)"))
        if not _finite(n.sigma_max) or (_finite(n.sigma_min) and n.sigma_max < n.sigma_min):
            out.append(Violation("noise.sigma_max", n.sigma_max,
                                 "finite sigma_max >= sigma_min (bounded noise amplitude)"))
        if not _finite(n.sigma0) or n.sigma0 <= 0:
            out.append(Violation("noise.sigma0", n.sigma0, "sigma0 > 0"))
        elif n.kind is NoiseKind.CONSTANT and _finite(n.sigma_min) and _finite(n.sigma_max):
            if not n.sigma_min <= n.sigma0 <= n.sigma_max:
                out.append(Violation("noise.sigma0", n.sigma0,
                                     f"sigma_min <= sigma0 <= sigma_max for constant noise"))
    if d is not None:
        if len(d.lo) != 3 or len(d.hi) != 3:
            out.append(Violation("domain", d, "3-vectors lo and hi"))
        else:
            for i, (lo, hi) in enumerate(zip(d.lo, d.hi)):
                if not (_finite(lo) and _finite(hi)) or not lo < hi:
                    out.append(Violation(f"domain.lo[{i}]/hi[{i}]", (lo, hi),
                                         "finite lo < hi (nonempty open box)"))
    return out


def validate(p: ModelParams, n: NoiseSpec, d: Domain):
    """Return ``(p, n, d)`` unchanged, or raise :class:`ValidationError`."""
    bad = find_violations(p, n, d)
    if bad:
        raise ValidationError(bad)
    return p, n, d
