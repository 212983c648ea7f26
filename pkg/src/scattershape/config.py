"""Run configuration: versioned JSON schema, validation, normalization.

A run config is a single JSON document driving every CLI verb.  Parsing
is strict — the schema pins types and ranges and rejects unknown keys —
so a typo fails before any compute starts.  :func:`normalize_config`
fills defaults and is idempotent: normalize(emit(normalize(c))) is a
fixed point, which keeps config snapshots written by one command valid
inputs for the next.

Meshes are specified either as a file path or as a built-in icosphere
recipe ``{"icosphere_level": L, "scale": [..], "translate": [..]}``.
"""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from .bem import ShapeMismatch, WaveSet
from .gauss_newton import GNConfig
from .mesh import TriangleMesh, icosphere, load_mesh
from .tangent_point import EnergyParams

logger = logging.getLogger(__name__)

__all__ = ["ConfigError", "CONFIG_VERSION", "CONFIG_SCHEMA", "load_config",
           "normalize_config", "emit_config", "build_waves", "build_mesh",
           "build_gn_config", "build_energy_params"]

CONFIG_VERSION = 1

_MESH_SPEC = {
    "oneOf": [
        {"type": "string", "minLength": 1},
        {
            "type": "object",
            "properties": {
                "icosphere_level": {"type": "integer", "minimum": 0,
                                    "maximum": 7},
                "scale": {"type": "array", "items": {"type": "number"},
                          "minItems": 3, "maxItems": 3},
                "translate": {"type": "array", "items": {"type": "number"},
                              "minItems": 3, "maxItems": 3},
            },
            "required": ["icosphere_level"],
            "additionalProperties": False,
        },
    ]
}

_UNIT3 = {"type": "array", "items": {"type": "number"}, "minItems": 3,
          "maxItems": 3}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "seed": {"type": "integer", "minimum": 0,
                 "maximum": 2 ** 64 - 1},
        "output_dir": {"type": "string", "minLength": 1},
        "grid_level": {"type": "integer", "minimum": 0, "maximum": 6},
        "waves": {
            "type": "object",
            "properties": {
                "kappas": {"type": "array",
                           "items": {"type": "number",
                                     "exclusiveMinimum": 0},
                           "minItems": 1},
                "directions": {"type": "array", "items": _UNIT3,
                               "minItems": 1},
                "etas": {"type": "array",
                         "items": {"type": "number",
                                   "exclusiveMinimum": 0}},
            },
            "required": ["kappas", "directions"],
            "additionalProperties": False,
        },
        "solver": {
            "type": "object",
            "properties": {
                "alpha0": {"type": "number", "exclusiveMinimum": 0},
                "rho": {"type": "number", "exclusiveMinimum": 0,
                        "exclusiveMaximum": 1},
                "tau": {"type": "number", "exclusiveMinimum": 1},
                "sigma_armijo": {"type": "number", "minimum": 0,
                                 "exclusiveMaximum": 1},
                "max_iterations": {"type": "integer", "minimum": 0},
                "tol_forward": {"type": "number", "exclusiveMinimum": 0},
                "tol_derivative": {"type": "number",
                                   "exclusiveMinimum": 0},
                "tol_update": {"type": "number", "exclusiveMinimum": 0},
                "update_max_iter": {"type": "integer", "minimum": 1},
                "min_step": {"type": "number", "exclusiveMinimum": 0},
                "remesh_every": {"type": "integer", "minimum": 1},
                "edge_ratio_limit": {"type": "number",
                                     "exclusiveMinimum": 1},
                "smoothing_rounds": {"type": "integer", "minimum": 0},
                "stages": {"type": "array",
                           "items": {"type": "array",
                                     "items": {"type": "integer",
                                               "minimum": 0},
                                     "minItems": 1},
                           "minItems": 1},
            },
            "additionalProperties": False,
        },
        "energy": {
            "type": "object",
            "properties": {
                "p": {"type": "number", "exclusiveMinimum": 4},
                "include_adjacent": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "true_mesh": _MESH_SPEC,
        "initial_mesh": _MESH_SPEC,
        "noise_percent": {"type": "number", "minimum": 0},
        "eta_override": {"type": "number", "exclusiveMinimum": 0},
        "far_field_file": {"type": "string", "minLength": 1},
        "remesh_target_edge": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["version", "waves", "grid_level"],
    "additionalProperties": False,
}

_DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/out",
    "noise_percent": 0.0,
    "far_field_file": "far_field.ff",
    "solver": {},
    "energy": {},
}

_validator = Draft202012Validator(CONFIG_SCHEMA)


class ConfigError(Exception):
    """Configuration rejected before any compute (exit code 2)."""


def load_config(path) -> dict:
    """Read, validate, and normalize a JSON run config."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"{path}:{err.lineno}:{err.colno}: invalid JSON: "
            f"{err.msg}") from err
    return normalize_config(raw, source=str(path))


def normalize_config(raw: dict, source: str = "<config>") -> dict:
    """Validate against the schema and fill defaults (idempotent)."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: config must be a JSON object")
    errors = sorted(_validator.iter_errors(raw), key=lambda e: e.json_path)
    if errors:
        lines = [f"{source}: {err.json_path}: {err.message}"
                 for err in errors[:8]]
        raise ConfigError("\n".join(lines))
    cfg = copy.deepcopy(raw)
    for key, value in _DEFAULTS.items():
        cfg.setdefault(key, copy.deepcopy(value))
    solver_defaults = GNConfig()
    for name in ("alpha0", "rho", "tau", "sigma_armijo", "max_iterations",
                 "tol_forward", "tol_derivative", "tol_update",
                 "update_max_iter", "min_step", "remesh_every",
                 "edge_ratio_limit", "smoothing_rounds"):
        cfg["solver"].setdefault(name, getattr(solver_defaults, name))
    energy_defaults = EnergyParams()
    cfg["energy"].setdefault("p", energy_defaults.p)
    cfg["energy"].setdefault("include_adjacent",
                             energy_defaults.include_adjacent)
    waves = cfg["waves"]
    if "etas" in waves and len(waves["etas"]) != len(waves["kappas"]):
        raise ConfigError(f"{source}: waves.etas must have one entry per "
                          f"wavenumber")
    try:
        build_waves(cfg)
        build_gn_config(cfg)
        build_energy_params(cfg)
    except (ValueError, TypeError, ShapeMismatch) as err:
        raise ConfigError(f"{source}: {err}") from err
    return cfg


def emit_config(cfg: dict) -> str:
    """Serialize a normalized config (stable key order, round-trips)."""
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def build_waves(cfg: dict, eta_override: float = None) -> WaveSet:
    """WaveSet from the config block, optionally overriding every eta."""
    waves = cfg["waves"]
    kappas = np.asarray(waves["kappas"], dtype=np.float64)
    directions = np.asarray(waves["directions"], dtype=np.float64)
    norms = np.linalg.norm(directions, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("incident directions must be nonzero")
    directions = directions / norms
    if eta_override is not None:
        etas = np.full(kappas.shape, float(eta_override))
    elif "etas" in waves:
        etas = np.asarray(waves["etas"], dtype=np.float64)
    else:
        etas = None
    return WaveSet(kappas, directions, etas)


def build_mesh(spec, base_dir=None) -> TriangleMesh:
    """Mesh from a path string or an icosphere recipe."""
    if isinstance(spec, str):
        path = Path(spec)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigError(f"mesh file not found: {path}")
        return load_mesh(path)
    mesh = icosphere(spec["icosphere_level"])
    verts = mesh.vertices
    if "scale" in spec:
        verts = verts * np.asarray(spec["scale"], dtype=np.float64)
    if "translate" in spec:
        verts = verts + np.asarray(spec["translate"], dtype=np.float64)
    if "scale" in spec or "translate" in spec:
        mesh = mesh.with_vertices(verts)
    return mesh


def build_gn_config(cfg: dict) -> GNConfig:
    solver = dict(cfg.get("solver", {}))
    stages = solver.pop("stages", None)
    if stages is not None:
        n_kappas = len(cfg["waves"]["kappas"])
        for group in stages:
            bad = [i for i in group if i >= n_kappas]
            if bad:
                raise ValueError(
                    f"stage indices {bad} out of range for "
                    f"{n_kappas} wavenumbers")
        stages = tuple(tuple(group) for group in stages)
    return GNConfig(energy=build_energy_params(cfg), stages=stages,
                    **solver)


def build_energy_params(cfg: dict) -> EnergyParams:
    block = cfg.get("energy", {})
    return EnergyParams(p=block.get("p", 6.0),
                        include_adjacent=block.get("include_adjacent",
                                                   True))
