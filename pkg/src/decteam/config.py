"""JSON scenario configs.

Top-level keys: ``scenario``, ``grid``, ``blocks``, ``dynamics``,
``observations``, ``cost``, ``init`` and an optional ``solver`` section.
Matrices are row-major nested lists; a coefficient given with one extra
leading axis is read as a per-node table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SpecError
from .model import BroadcastSpec, LqTeamSpec, TimeGrid

SCENARIOS = ("broadcast", "lq_team", "filtering_team")


class ConfigError(SpecError):
    """A config file is unreadable, incomplete or inconsistent."""


@dataclass
class Scenario:
    kind: str
    spec: LqTeamSpec | BroadcastSpec
    grid: TimeGrid
    solver: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _arr(section, key, required=True, default=None):
    if key not in section:
        if required:
            raise ConfigError(f"missing config entry '{key}'")
        return default
    try:
        return np.asarray(section[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config entry '{key}' is not a numeric array: {exc}") from None


def _section(cfg, name):
    sec = cfg.get(name)
    if not isinstance(sec, dict):
        raise ConfigError(f"missing config section '{name}'")
    return sec


def parse_config(cfg: dict, dt: float | None = None) -> Scenario:
    """Build a scenario from a decoded config; ``dt`` overrides the grid step."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    kind = cfg.get("scenario", "lq_team")
    if kind not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{kind}'; expected one of {', '.join(SCENARIOS)}")
    g = _section(cfg, "grid")
    try:
        grid = TimeGrid(float(g["T"]), float(dt if dt is not None else g["dt"]))
    except KeyError as exc:
        raise ConfigError(f"missing config entry 'grid.{exc.args[0]}'") from None
    except SpecError as exc:
        raise ConfigError(str(exc)) from None
    blocks = _section(cfg, "blocks")
    obs, cost, init = _section(cfg, "observations"), _section(cfg, "cost"), _section(cfg, "init")
    solver = dict(cfg.get("solver", {}))
    try:
        d_blocks = tuple(int(v) for v in blocks["d"])
        k_blocks = tuple(int(v) for v in blocks["k"])
    except KeyError as exc:
        raise ConfigError(f"missing config entry 'blocks.{exc.args[0]}'") from None
    try:
        if kind == "broadcast":
            if not isinstance(obs.get("C"), list) or len(obs["C"]) != len(d_blocks):
                raise ConfigError("broadcast observations.C must list one channel gain per receiver")
            spec = BroadcastSpec(
                C=tuple(np.asarray(c, dtype=float) for c in obs["C"]), D=_arr(obs, "D"),
                H=_arr(cost, "H"), R=_arr(cost, "R"), E=_arr(cost, "E", False), m=_arr(cost, "m", False),
                F=_arr(cost, "F", False), mean=_arr(init, "mean"), cov=_arr(init, "cov"),
                d_blocks=d_blocks, k_blocks=k_blocks,
            )
        else:
            dyn = _section(cfg, "dynamics")
            spec = LqTeamSpec(
                A=_arr(dyn, "A"), B=_arr(dyn, "B"), G=_arr(dyn, "G"), C=_arr(obs, "C"), D=_arr(obs, "D"),
                H=_arr(cost, "H"), R=_arr(cost, "R"), E=_arr(cost, "E", False), m=_arr(cost, "m", False),
                F=_arr(cost, "F", False), M_T=_arr(cost, "M_T", False), mean=_arr(init, "mean"),
                cov=_arr(init, "cov"), n_blocks=tuple(int(v) for v in blocks.get("n", [])),
                d_blocks=d_blocks, k_blocks=k_blocks, m_blocks=tuple(int(v) for v in blocks.get("m", ())),
            )
            if not spec.n_blocks:
                raise ConfigError("missing config entry 'blocks.n'")
    except ConfigError:
        raise
    except (SpecError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return Scenario(kind, spec, grid, solver, cfg)


def load_config(path, dt: float | None = None) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(cfg, dt)


def config_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _lst(a):
    return np.asarray(a).tolist()


def spec_to_config(spec, grid: TimeGrid, scenario: str | None = None, solver: dict | None = None) -> dict:
    """Inverse of :func:`parse_config`."""
    cost = {"H": _lst(spec.H), "R": _lst(spec.R), "E": _lst(spec.E), "m": _lst(spec.m), "F": _lst(spec.F)}
    out = {
        "grid": {"T": grid.T, "dt": grid.dt},
        "init": {"mean": _lst(spec.mean), "cov": _lst(spec.cov)},
    }
    if isinstance(spec, BroadcastSpec):
        if spec.feedback:
            raise ConfigError("output-dependent channels cannot be written to a config file")
        out["scenario"] = scenario or "broadcast"
        out["blocks"] = {"d": list(spec.d_blocks), "k": list(spec.k_blocks)}
        out["observations"] = {"C": [_lst(c) for c in spec.C], "D": _lst(spec.D)}
    else:
        out["scenario"] = scenario or "lq_team"
        out["blocks"] = {"n": list(spec.n_blocks), "d": list(spec.d_blocks), "k": list(spec.k_blocks),
                         "m": list(spec.m_blocks)}
        out["dynamics"] = {"A": _lst(spec.A), "B": _lst(spec.B), "G": _lst(spec.G)}
        out["observations"] = {"C": _lst(spec.C), "D": _lst(spec.D)}
        cost["M_T"] = _lst(spec.M_T)
    out["cost"] = cost
    if solver:
        out["solver"] = dict(solver)
    return out


def dump_config(spec, grid: TimeGrid, path, scenario: str | None = None, solver: dict | None = None) -> None:
    Path(path).write_text(json.dumps(spec_to_config(spec, grid, scenario, solver), indent=2, sort_keys=True) + "\n")
