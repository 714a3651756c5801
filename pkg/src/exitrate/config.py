"""Scenario files: a JSON tree with one section per component.

Required: ``model`` (all rates), ``domain.lo``/``domain.hi``, ``x0`` and
``grid.n``.  Every other field has the default listed in ``_SCHEMA``.
Unknown keys are errors, and all problems are reported together.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Optional

from .control import ControlBounds
from .model import (Domain, ModelParams, NoiseSpec, State3, _COEF_ORDER,
                    find_violations)
from .simulate import SimConfig

REQUIRED = object()


class ConfigError(ValueError):
    """Carries every problem found, each naming its dotted key path."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class ControlConfig:
    u_min: float = 0.0
    u_max: float = 0.0
    tie_tolerance: float = 0.0
    fixed_u: float = 0.0  # constant control for simulate/survival/eigen/...
    scheme: str = "upwind"

    @property
    def bounds(self) -> ControlBounds:
        return ControlBounds(self.u_min, self.u_max, self.tie_tolerance)


@dataclass(frozen=True)
class RiskSection:
    thetas: tuple[float, ...] = (0.01,)
    eps_noise: float = 1.0


@dataclass(frozen=True)
class Tolerances:
    tol_lambda: float = 1e-10
    solver_tol: float = 1e-10
    rate_tolerance_multiplier: float = 2.0
    disc_allowance: float = 0.0
    max_outer: int = 50
    max_iter: int = 10_000


@dataclass(frozen=True)
class ScenarioConfig:
    model: ModelParams
    noise: NoiseSpec
    domain: Domain
    x0: State3
    sim: SimConfig
    grid: tuple[int, int, int]
    control: ControlConfig = field(default_factory=ControlConfig)
    risk: RiskSection = field(default_factory=RiskSection)
    tolerances: Tolerances = field(default_factory=Tolerances)
    fit_window: Optional[tuple[float, float]] = None
    output_dir: str = "out"
    description: str = ""

    def to_dict(self) -> dict:
        s = self.sim
        return {
            "description": self.description,
            "model": self.model.to_dict(),
            "noise": self.noise.to_dict(),
            "domain": self.domain.to_dict(),
            "x0": list(self.x0),
            "sim": {"dt": s.dt, "t_max": s.t_max, "n_paths": s.n_paths, "seed": s.seed,
                    "record_trajectory": s.record_trajectory, "eps_noise": s.eps_noise,
                    "n_curve": s.n_curve,
                    "fit_window": list(self.fit_window) if self.fit_window else None},
            "grid": {"n": list(self.grid)},
            "control": vars(self.control).copy(),
            "risk": {"thetas": list(self.risk.thetas), "eps_noise": self.risk.eps_noise},
            "tolerances": vars(self.tolerances).copy(),
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def sha256(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, seed=None, n_paths=None, output_dir=None) -> "ScenarioConfig":
        sim = self.sim
        if seed is not None:
            sim = replace(sim, seed=int(seed))
        if n_paths is not None:
            sim = replace(sim, n_paths=int(n_paths))
        return replace(self, sim=sim,
                       output_dir=self.output_dir if output_dir is None else str(output_dir))


# --------------------------------------------------------------------------
# schema: section -> key -> (kind, default)
# --------------------------------------------------------------------------

_SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "model": {**{k: ("float", REQUIRED) for k in _COEF_ORDER},
              "conservation_mode": ("str", "corrected")},
    "noise": {"kind": ("str", "constant"), "sigma0": ("float", 0.1),
              "sigma_min": ("float", 1e-3), "sigma_max": ("float", 10.0)},
    "domain": {"lo": ("vec3", REQUIRED), "hi": ("vec3", REQUIRED)},
    "sim": {"dt": ("float", 1e-3), "t_max": ("float", 5.0), "n_paths": ("int", 1000),
            "seed": ("int", 0), "record_trajectory": ("bool", False),
            "eps_noise": ("float", 1.0), "n_curve": ("int", 200),
            "fit_window": ("window", None)},
    "grid": {"n": ("ivec3", REQUIRED)},
    "control": {"u_min": ("float", 0.0), "u_max": ("float", 0.0),
                "tie_tolerance": ("float", 0.0), "fixed_u": ("float", 0.0),
                "scheme": ("str", "upwind")},
    "risk": {"thetas": ("floats", [0.01]), "eps_noise": ("float", 1.0)},
    "tolerances": {"tol_lambda": ("float", 1e-10), "solver_tol": ("float", 1e-10),
                   "rate_tolerance_multiplier": ("float", 2.0),
                   "disc_allowance": ("float", 0.0), "max_outer": ("int", 50),
                   "max_iter": ("int", 10_000)},
}
_TOP = {"x0": ("vec3", REQUIRED), "output_dir": ("str", "out"), "description": ("str", "")}
_REQUIRED_SECTIONS = {"model", "domain", "grid"}


def _coerce(kind: str, v, path: str, errors: list[str]):
    def bad(what):
        errors.append(f"{path}: expected {what}, got {v!r}")

    if kind == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return bad("a number")
        return float(v)
    if kind == "int":
        if isinstance(v, bool) or not isinstance(v, (int, float)) or \
                (isinstance(v, float) and not (math.isfinite(v) and v.is_integer())):
            return bad("an integer")
        return int(v)
    if kind == "bool":
        return v if isinstance(v, bool) else bad("true or false")
    if kind == "str":
        return v if isinstance(v, str) else bad("a string")
    if kind in ("vec3", "ivec3"):
        if not isinstance(v, list) or len(v) != 3:
            return bad("a list of 3 numbers")
        out = [_coerce("int" if kind == "ivec3" else "float", e, f"{path}[{i}]", errors)
               for i, e in enumerate(v)]
        return None if None in out else tuple(out)
    if kind == "window":
        if v is None:
            return None
        if not isinstance(v, list) or len(v) != 2:
            return bad("null or [t_lo, t_hi]")
        out = [_coerce("float", e, f"{path}[{i}]", errors) for i, e in enumerate(v)]
        return None if None in out else tuple(out)
    if kind == "floats":
        if not isinstance(v, list) or not v:
            return bad("a nonempty list of numbers")
        out = [_coerce("float", e, f"{path}[{i}]", errors) for i, e in enumerate(v)]
        return None if None in out else tuple(out)
    raise AssertionError(kind)


def _read_section(tree: dict, schema: dict, prefix: str, errors: list[str]) -> dict:
    for k in tree:
        if k not in schema:
            errors.append(f"{prefix}{k}: unknown key")
    out = {}
    for k, (kind, default) in schema.items():
        if k in tree:
            out[k] = _coerce(kind, tree[k], prefix + k, errors)
        elif default is REQUIRED:
            errors.append(f"{prefix}{k}: missing required field")
            out[k] = None
        else:
            out[k] = tuple(default) if isinstance(default, list) else default
    return out


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate a JSON scenario; raise :class:`ConfigError` on any problem."""
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from exc
    if not isinstance(tree, dict):
        raise ConfigError(["top level: expected a JSON object"])

    errors: list[str] = []
    top_schema = {**_TOP, **{s: ("section", None) for s in _SCHEMA}}
    for k in tree:
        if k not in top_schema:
            errors.append(f"{k}: unknown key")
    sec = {}
    for name, schema in _SCHEMA.items():
        raw = tree.get(name)
        if raw is None:
            if name in _REQUIRED_SECTIONS:
                errors.append(f"{name}: missing required section")
            raw = {}
        if not isinstance(raw, dict):
            errors.append(f"{name}: expected an object")
            raw = {}
        sec[name] = _read_section(raw, schema, name + ".", errors)
    top = _read_section({k: v for k, v in tree.items() if k in _TOP}, _TOP, "", errors)
    if errors:
        raise ConfigError(errors)
    return _build(sec, top)


def _build(sec: dict, top: dict) -> ScenarioConfig:
    errors: list[str] = []
    m, nz, s = sec["model"], sec["noise"], sec["sim"]
    try:
        model = ModelParams(**m)
    except ValueError:
        errors.append(f"model.conservation_mode: expected 'corrected' or 'paper_literal', "
                      f"got {m['conservation_mode']!r}")
        model = ModelParams(**{**m, "conservation_mode": "corrected"})
    try:
        noise = NoiseSpec(**nz)
    except ValueError:
        errors.append(f"noise.kind: expected 'constant' or 'affine_clamped', got {nz['kind']!r}")
        noise = NoiseSpec(**{**nz, "kind": "constant"})
    domain = Domain(**sec["domain"])
    errors += [str(v) for v in find_violations(model, noise, domain)]

    x0 = State3(*top["x0"])
    if not domain.contains(x0.as_array()):
        errors.append(f"x0={tuple(x0)}: must lie strictly inside the domain")

    window = s.pop("fit_window")
    try:
        sim = SimConfig(**s)
    except ValueError as exc:
        errors.append(f"sim: {exc}")
        sim = None
    if window is not None and not window[0] < window[1]:
        errors.append(f"sim.fit_window={window}: requires t_lo < t_hi")

    grid = sec["grid"]["n"]
    if min(grid) < 3:
        errors.append(f"grid.n={grid}: every axis needs at least 3 nodes")

    c = ControlConfig(**sec["control"])
    if not c.u_min <= c.u_max:
        errors.append(f"control.u_min={c.u_min}: requires u_min <= u_max ({c.u_max})")
    if not c.tie_tolerance >= 0:
        errors.append(f"control.tie_tolerance={c.tie_tolerance}: requires >= 0")
    if c.scheme not in ("upwind", "central"):
        errors.append(f"control.scheme={c.scheme!r}: expected 'upwind' or 'central'")

    r = RiskSection(**sec["risk"])
    if not all(t > 0 for t in r.thetas):
        errors.append(f"risk.thetas={r.thetas}: every theta must be > 0")
    if not r.eps_noise > 0:
        errors.append(f"risk.eps_noise={r.eps_noise}: requires > 0")

    tol = Tolerances(**sec["tolerances"])
    for k in ("tol_lambda", "solver_tol", "rate_tolerance_multiplier"):
        if not getattr(tol, k) > 0:
            errors.append(f"tolerances.{k}={getattr(tol, k)}: requires > 0")
    if not tol.disc_allowance >= 0:
        errors.append(f"tolerances.disc_allowance={tol.disc_allowance}: requires >= 0")
    for k in ("max_outer", "max_iter"):
        if getattr(tol, k) < 1:
            errors.append(f"tolerances.{k}={getattr(tol, k)}: requires >= 1")

    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(model, noise, domain, x0, sim, grid, c, r, tol, window,
                          top["output_dir"], top["description"])


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        return parse_config(fh.read())
