"""YAML experiment configuration: schema, defaults, validation and hashing.

Every key has a provenance tag. ``published`` marks values taken from the
reference simulation setup; ``constructed`` marks artifact choices made here
because no number is published.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import yaml

from .controllers import CONTROLLERS, OcParams
from .density import DiffusionModel
from .functionals import GainSet, SafetyRegion
from .grid import Boundary, GridSpec
from .sim import SimConfig


class ConfigError(ValueError):
    """Schema violation; ``path`` is the dotted key path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class Key:
    path: str
    kind: str  # float, int, bool, str, pair, positions
    default: Any
    provenance: str
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


SCHEMA: tuple[Key, ...] = (
    Key("grid.side", "float", 4.0, "published", _pos, "> 0"),
    Key("grid.spacing", "float", 0.1, "published", _pos, "> 0"),
    Key("grid.center", "pair", (0.0, 0.0), "constructed"),
    Key("grid.boundary", "str", "periodic", "published", lambda v: v in ("periodic", "neumann"), "periodic|neumann"),
    Key("sim.t_f", "float", 4.0, "published", _pos, "> 0"),
    Key("sim.dt", "float", 0.01, "published", _pos, "> 0"),
    Key("sim.n_robots", "int", 6, "published", _pos, ">= 1"),
    Key("sim.seed", "int", 0, "constructed", _nonneg, ">= 0"),
    Key("sim.n_runs", "int", 1, "constructed", _pos, ">= 1"),
    Key("sim.on_exit", "str", "clamp", "constructed", lambda v: v in ("clamp", "abort"), "clamp|abort"),
    Key("sim.init_positions", "positions", None, "constructed"),
    Key("sim.ring_radius", "float", 1.5, "constructed", _pos, "> 0"),
    Key("sim.ring_phase", "float", 7 * math.pi / 12, "constructed"),
    Key("sim.init_jitter", "float", 0.05, "constructed", _nonneg, ">= 0"),
    Key("sim.measurement_noise", "bool", True, "published"),
    Key("sim.motion_noise", "bool", True, "published"),
    Key("sim.backstep", "bool", False, "constructed"),
    Key("target.mean", "pair", (0.5, -0.5), "published"),
    Key("target.std", "float", 1.5, "published", _pos, "> 0"),
    Key("target.peak", "float", None, "constructed", _pos, "> 0"),
    Key("target.mass", "float", None, "constructed", _pos, "> 0"),
    Key("region.center", "pair", (-0.5, 0.5), "constructed"),
    Key("region.radius", "float", 0.6, "constructed", _pos, "> 0"),
    Key("belief.lambda", "float", 16.0, "constructed", _pos, "> 0"),
    Key("gains.alpha_v", "float", 1.0, "constructed", _pos, "> 0"),
    Key("gains.alpha_h", "float", 100.0, "constructed", _pos, "> 0"),
    Key("gains.gamma", "float", 1000.0, "constructed", _pos, "> 0"),
    Key("gains.epsilon", "float", None, "constructed", _pos, "> 0"),
    Key("gains.d_safe", "float", 0.1, "constructed", _nonneg, ">= 0"),
    Key("model.c", "float", 0.05, "constructed", _nonneg, ">= 0"),
    Key("model.u_max", "float", 0.25, "constructed", _pos, "> 0"),
    Key("controller", "str", "RvObc", "constructed", lambda v: v in CONTROLLERS, "|".join(CONTROLLERS)),
    Key("oc.alpha", "float", 200.0, "constructed", _pos, "> 0"),
    Key("oc.penalty_step", "float", 200.0, "constructed", _pos, "> 0"),
    Key("oc.relaxation", "float", 0.5, "constructed", lambda v: 0 < v <= 1, "in (0, 1]"),
    Key("oc.max_sweeps", "int", 40, "constructed", _pos, ">= 1"),
    Key("oc.tol", "float", 1e-4, "constructed", _pos, "> 0"),
)

_BY_PATH = {k.path: k for k in SCHEMA}


def _coerce(key: Key, value):
    p = key.path
    if value is None:
        return None
    if key.kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(p, f"expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(p, "must be finite")
    elif key.kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(p, f"expected an integer, got {value!r}")
    elif key.kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(p, f"expected true/false, got {value!r}")
    elif key.kind == "str":
        if not isinstance(value, str):
            raise ConfigError(p, f"expected a string, got {value!r}")
    elif key.kind == "pair":
        if not (isinstance(value, (list, tuple)) and len(value) == 2):
            raise ConfigError(p, f"expected [x, y], got {value!r}")
        value = tuple(_coerce(Key(p, "float", None, ""), v) for v in value)
    elif key.kind == "positions":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(p, "expected a list of [x, y] pairs")
        value = tuple(_coerce(Key(f"{p}[{i}]", "pair", None, ""), v) for i, v in enumerate(value))
    if key.check is not None and not key.check(value):
        raise ConfigError(p, f"value {value!r} violates {key.rule}")
    return value


def _flatten(tree, prefix="") -> dict:
    out = {}
    if not isinstance(tree, dict):
        raise ConfigError(prefix or "<root>", "expected a mapping")
    for k, v in tree.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


def _cross_check(values: dict, explicit: set) -> dict:
    if values["target.peak"] is not None and values["target.mass"] is not None:
        raise ConfigError("target", "give at most one of peak and mass")
    if values["gains.epsilon"] is not None and "gains.d_safe" not in explicit:
        values["gains.d_safe"] = None  # an explicit epsilon replaces calibration
    if values["gains.epsilon"] is not None and values["gains.d_safe"] is not None:
        raise ConfigError("gains", "give either epsilon or d_safe, not both")
    if values["gains.epsilon"] is None and values["gains.d_safe"] is None:
        raise ConfigError("gains", "one of epsilon and d_safe is required")
    if values["sim.t_f"] < values["sim.dt"]:
        raise ConfigError("sim.t_f", "must be at least sim.dt")
    ip = values["sim.init_positions"]
    if ip is not None and len(ip) != values["sim.n_robots"]:
        raise ConfigError("sim.init_positions", f"needs {values['sim.n_robots']} entries (sim.n_robots)")
    return values


def resolve(tree: dict | None) -> dict:
    """Validated flat ``{path: value}`` with defaults filled in."""
    flat = _flatten(tree or {})
    for path in flat:
        if path not in _BY_PATH:
            raise ConfigError(path, "unknown key")
    values = {k.path: _coerce(k, flat.get(k.path, k.default)) for k in SCHEMA}
    return _cross_check(values, set(flat))


def override(values: dict, changes: dict) -> dict:
    """Resolved values with ``changes`` (flat paths) applied and re-validated."""
    out = dict(values)
    for path, v in changes.items():
        if path not in _BY_PATH:
            raise ConfigError(path, "unknown key")
        out[path] = _coerce(_BY_PATH[path], v)
    explicit = set(changes) | ({"gains.d_safe"} if out["gains.d_safe"] is not None else set())
    return _cross_check(out, explicit)


def to_tree(values: dict) -> dict:
    tree: dict = {}
    for path, v in values.items():
        node = tree
        *head, last = path.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = [list(p) for p in v] if isinstance(v, tuple) and v and isinstance(v[0], tuple) else (
            list(v) if isinstance(v, tuple) else v
        )
    return tree


def config_hash(values: dict) -> str:
    canon = json.dumps(to_tree(values), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_yaml(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {exc}") from exc
    return resolve(tree)


def build_sim_config(values: dict) -> SimConfig:
    """Translate resolved values into a :class:`SimConfig`; value errors carry key paths."""
    v = values
    try:
        grid = GridSpec.square(v["grid.side"], v["grid.spacing"], v["grid.center"], Boundary(v["grid.boundary"]))
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from exc
    region = SafetyRegion(v["region.center"], v["region.radius"])
    try:
        region.check_inside(grid)
    except ValueError as exc:
        raise ConfigError("region", str(exc)) from exc
    gains = GainSet(v["gains.alpha_v"], v["gains.alpha_h"], v["gains.gamma"], v["gains.epsilon"] or 1.0)  # replaced by calibration when d_safe is set
    oc = OcParams(
        alpha=v["oc.alpha"],
        penalty_step=v["oc.penalty_step"],
        relaxation=v["oc.relaxation"],
        max_sweeps=v["oc.max_sweeps"],
        tol=v["oc.tol"],
    )
    try:
        return SimConfig(
            grid=grid,
            t_f=v["sim.t_f"],
            dt=v["sim.dt"],
            n_robots=v["sim.n_robots"],
            init_true_pos=v["sim.init_positions"],
            target_mean=v["target.mean"],
            target_std=v["target.std"],
            target_mass=v["target.mass"],
            target_peak=v["target.peak"],
            region=region,
            gains=gains,
            d_safe=v["gains.d_safe"],
            model=DiffusionModel(v["model.c"], v["model.u_max"]),
            lam=v["belief.lambda"],
            controller=v["controller"],
            seed=v["sim.seed"],
            n_runs=v["sim.n_runs"],
            measurement_noise=v["sim.measurement_noise"],
            motion_noise=v["sim.motion_noise"],
            init_jitter=v["sim.init_jitter"],
            ring_radius=v["sim.ring_radius"],
            ring_phase=v["sim.ring_phase"],
            on_exit=v["sim.on_exit"],
            oc=oc,
            backstep=v["sim.backstep"],
        )
    except ValueError as exc:
        raise ConfigError("<config>", str(exc)) from exc


def schema_rows() -> list[tuple[str, str, str, str]]:
    """(key, default, provenance, rule) rows for documentation."""
    return [(k.path, repr(k.default), k.provenance, k.rule) for k in SCHEMA]
