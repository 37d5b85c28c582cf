"""Run specifications: parsing, validation and default filling.

A run file is YAML::

    run_id: heat
    energy: dirichlet1d(129)          # or {name: dirichlet1d, n: 129}
    initial: ramp                     # constant(c), ramp, step(at), sine(k),
                                      # cosine(k), random(seed, scale)
    flow: {tau: 1.0e-3, t_end: 3.0}
    analysis: {kl_fit: true, omega: true, length: true}

``tau`` and ``t_end`` may also sit at top level. Random initial data draws
from numpy's PCG64 generator seeded with ``seed`` (standard normal values
times ``scale``), so a fixed seed reproduces the same bits on any platform
numpy supports.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .energies import make_energy, parse_energy, resolve_energy_spec
from .energy import EnergyHandle

ANALYSIS_DEFAULTS = {
    "kl_fit": True,
    "omega": True,
    "length": True,
    "chain_rule": False,
    "kls_check": True,
    "omega_threshold": 1e-6,
    "kls_threshold": 0.95,
}

FLOW_DEFAULTS = {
    "prox_tol": 1e-9,
    "record_every": None,
    "certify": True,
    "slopes": True,
    "forcing": None,
}

INITIAL_KINDS = {
    "constant": {"value": 1.0},
    "ramp": {},
    "step": {"at": 0.5, "low": 0.0, "high": 1.0},
    "sine": {"k": 1, "amplitude": 1.0},
    "cosine": {"k": 1, "amplitude": 1.0},
    "random": {"seed": None, "scale": 1.0},
}

_POSITIONAL_INITIAL = {"constant": ["value"], "step": ["at", "low", "high"],
                       "sine": ["k", "amplitude"], "cosine": ["k", "amplitude"],
                       "random": ["seed", "scale"], "ramp": []}

_RUN_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


def _number(value):
    """YAML 1.1 reads ``1e-3`` as a string; accept such numerals."""
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


class ConfigError(ValueError):
    """Invalid run file; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunSpec:
    run_id: str
    energy: dict
    initial: dict
    flow: dict
    analysis: dict
    output_dir: str
    seed: int
    write_states: bool = True

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "energy": self.energy, "initial": self.initial,
                "flow": self.flow, "analysis": self.analysis, "output_dir": self.output_dir,
                "seed": self.seed, "write_states": self.write_states}

    def build_energy(self) -> EnergyHandle:
        return make_energy(self.energy)

    def initial_state(self, E: EnergyHandle) -> np.ndarray:
        return initial_values(self.initial, E)

    def forcing(self, E: EnergyHandle):
        return make_forcing(self.flow.get("forcing"), E)


def _resolve_initial(raw, seed: int) -> dict:
    if isinstance(raw, str):
        parsed = parse_energy(raw)  # same call syntax
        kind = parsed.pop("name")
        args = parsed.pop("args")
        names = _POSITIONAL_INITIAL.get(kind)
        if names is None:
            raise ConfigError("initial", f"unknown generator {kind!r}; known: {sorted(INITIAL_KINDS)}")
        if len(args) > len(names):
            raise ConfigError("initial", f"too many arguments for {kind}")
        raw = {"kind": kind, **dict(zip(names, args)), **parsed}
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError("initial", "expected a generator name or a mapping with 'kind'")
    kind = raw["kind"]
    if kind not in INITIAL_KINDS:
        raise ConfigError("initial.kind", f"unknown generator {kind!r}; known: {sorted(INITIAL_KINDS)}")
    out = {"kind": kind, **INITIAL_KINDS[kind]}
    for key, val in raw.items():
        if key != "kind" and key not in INITIAL_KINDS[kind]:
            raise ConfigError(f"initial.{key}", f"not a parameter of {kind}")
        out[key] = _number(val)
    if kind == "random" and out["seed"] is None:
        out["seed"] = seed
    for key, val in out.items():
        if key != "kind" and not isinstance(val, (int, float)):
            raise ConfigError(f"initial.{key}", f"expected a number, got {val!r}")
    return out


def initial_values(init: dict, E: EnergyHandle) -> np.ndarray:
    grid = E.grid
    kind = init["kind"]
    x = grid.nodes[0] if grid.dim == 2 else grid.nodes
    if kind == "constant":
        return np.full(grid.shape, float(init["value"]))
    if kind == "ramp":
        return np.broadcast_to(x, grid.shape).astype(float).copy()
    if kind == "step":
        return np.where(x > init["at"], float(init["high"]), float(init["low"])).astype(float)
    if kind in ("sine", "cosine"):
        fn = np.sin if kind == "sine" else np.cos
        return float(init["amplitude"]) * fn(init["k"] * np.pi * x)
    rng = np.random.Generator(np.random.PCG64(int(init["seed"])))
    vals = float(init["scale"]) * rng.standard_normal(grid.shape)
    return E.project(vals)


def _resolve_forcing(raw):
    if raw is None:
        return None
    if not isinstance(raw, dict) or raw.get("kind") != "constant":
        raise ConfigError("flow.forcing", "only {kind: constant, value, until} is supported")
    out = {"kind": "constant", "value": 1.0, "until": math.inf}
    for key, val in raw.items():
        if key not in out:
            raise ConfigError(f"flow.forcing.{key}", "unknown key")
        out[key] = val
    for key in ("value", "until"):
        if not isinstance(out[key], (int, float)):
            raise ConfigError(f"flow.forcing.{key}", f"expected a number, got {out[key]!r}")
    return out


def make_forcing(spec, E: EnergyHandle):
    """Constant-in-space forcing ``value`` on ``[0, until)``, zero after."""
    if spec is None:
        return None
    val = np.full(E.grid.shape, float(spec["value"]))
    zero = np.zeros(E.grid.shape)
    until = float(spec["until"])
    return lambda t: val if t < until else zero


def resolve(raw: dict, output_dir: str | None = None, seed_override: int | None = None) -> RunSpec:
    """Validate a raw mapping and fill every default explicitly."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "run file must be a mapping")
    raw = copy.deepcopy(raw)
    known = {"run_id", "energy", "initial", "flow", "analysis", "output_dir", "seed",
             "tau", "t_end", "write_states"}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown top-level key")
    run_id = str(raw.get("run_id", "run"))
    if not _RUN_ID.match(run_id):
        raise ConfigError("run_id", f"{run_id!r} is not filesystem-safe")
    seed = raw.get("seed", 0) if seed_override is None else seed_override
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"expected a nonnegative integer, got {seed!r}")

    if "energy" not in raw:
        raise ConfigError("energy", "missing")
    try:
        energy = resolve_energy_spec(raw["energy"])
        E = make_energy(energy)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError("energy", str(exc)) from None

    flow = dict(raw.get("flow") or {})
    for key in ("tau", "t_end"):
        if key in raw:
            if key in flow:
                raise ConfigError(key, "given both at top level and under flow")
            flow[key] = raw[key]
    if isinstance(flow.get("forcing"), dict):
        flow["forcing"] = {k: _number(v) for k, v in flow["forcing"].items()}
    for key in flow:
        if key not in {"tau", "t_end", *FLOW_DEFAULTS}:
            raise ConfigError(f"flow.{key}", "unknown key")
    for key in ("tau", "t_end", "prox_tol"):
        if key in flow:
            flow[key] = _number(flow[key])
    for key in ("tau", "t_end"):
        if key not in flow:
            raise ConfigError(f"flow.{key}", "missing")
        if not isinstance(flow[key], (int, float)) or not flow[key] > 0:
            raise ConfigError(f"flow.{key}", f"expected a positive number, got {flow[key]!r}")
        flow[key] = float(flow[key])
    flow = {**FLOW_DEFAULTS, **flow}
    flow["forcing"] = _resolve_forcing(flow["forcing"])
    if flow["t_end"] < flow["tau"]:
        raise ConfigError("flow.t_end", f"t_end={flow['t_end']} is shorter than tau={flow['tau']}")
    if E.omega > 0 and not flow["tau"] < 1.0 / (2.0 * E.omega):
        raise ConfigError("flow.tau", f"tau={flow['tau']} violates tau < 1/(2 omega) = "
                                      f"{1.0 / (2.0 * E.omega):.6g} for {E.name}")
    if flow["record_every"] is None:
        flow["record_every"] = 1 if E.grid.size <= 256 else 10
    if not isinstance(flow["record_every"], int) or flow["record_every"] < 1:
        raise ConfigError("flow.record_every", "expected a positive integer")
    if not isinstance(flow["prox_tol"], (int, float)) or not flow["prox_tol"] > 0:
        raise ConfigError("flow.prox_tol", "expected a positive number")

    analysis = dict(raw.get("analysis") or {})
    for key in analysis:
        if key not in ANALYSIS_DEFAULTS:
            raise ConfigError(f"analysis.{key}", "unknown switch")
    analysis = {**ANALYSIS_DEFAULTS, **analysis}
    for key in ("omega_threshold", "kls_threshold"):
        analysis[key] = _number(analysis[key])
        if not isinstance(analysis[key], (int, float)) or isinstance(analysis[key], bool):
            raise ConfigError(f"analysis.{key}", "expected a number")
    for key in ("kl_fit", "omega", "length", "chain_rule", "kls_check"):
        if not isinstance(analysis[key], bool):
            raise ConfigError(f"analysis.{key}", "expected true or false")

    initial = _resolve_initial(raw.get("initial", "constant(1)"), seed)
    if seed_override is not None and initial["kind"] == "random":
        # the override also replaces a seed written into random(...)
        initial["seed"] = seed_override
    init_vals = initial_values(initial, E)
    if not E.in_domain(init_vals):
        raise ConfigError("initial", f"initial state lies outside dom {E.name}")

    out_dir = output_dir or raw.get("output_dir", "runs")
    return RunSpec(run_id, energy, initial, flow, analysis, str(out_dir), seed,
                   bool(raw.get("write_states", True)))


def load(path: str | Path, output_dir: str | None = None,
         seed_override: int | None = None) -> RunSpec:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "<file>"
        raise ConfigError(where, f"YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    return resolve(raw, output_dir, seed_override)


def set_param(raw: dict, name: str, value) -> dict:
    """Copy of ``raw`` with a numeric field set; ``name`` is dotted
    (``flow.tau``, ``energy.p``) or a bare ``tau``/``t_end``/``p``/``n``."""
    raw = copy.deepcopy(raw)
    if "." not in name:
        if name in ("tau", "t_end"):
            if name in raw:
                raw[name] = value
                return raw
            name = f"flow.{name}"
        elif name == "seed":
            raw["seed"] = int(value)
            return raw
        else:
            name = f"energy.{name}"
    head, key = name.split(".", 1)
    if head == "energy":
        spec = resolve_energy_spec(raw["energy"])
        if key not in spec or key == "name":
            raise ConfigError(name, f"energy {spec['name']} has no numeric parameter {key!r}")
        spec[key] = int(value) if isinstance(spec[key], int) and float(value).is_integer() else value
        raw["energy"] = spec
        return raw
    section = raw.setdefault(head, {})
    if not isinstance(section, dict):
        raise ConfigError(name, f"{head} is not a mapping")
    section[key] = value
    return raw
