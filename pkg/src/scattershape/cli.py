"""The ``scatter`` command: batch verbs around the reconstruction stack.

One command per process; each verb reads a JSON run config, does its
work, and exits.  Exit codes: 0 success, 1 compute failure (a solver or
mesh operation failed, or a reconstruction stopped without reaching the
discrepancy target), 2 configuration error (schema violation, missing
file — always raised before any compute).

Flags may also come from the environment with a ``SCATTER_`` prefix
(``SCATTER_OUTPUT``, ``SCATTER_THREADS``, ``SCATTER_SEED``,
``SCATTER_LOG_LEVEL``); explicit flags win over the environment, which
wins over the config file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bem import (
    BoundaryOperator,
    EvalGrid,
    NoConvergence,
    far_field_to_csv,
    load_far_field,
    save_far_field,
)
from .collision import relative_hausdorff, signed_distance
from .config import (
    ConfigError,
    build_energy_params,
    build_gn_config,
    build_mesh,
    build_waves,
    emit_config,
    load_config,
)
from .gauss_newton import (
    NoProgress,
    grid_norm,
    irgnm_run,
    make_noisy_data,
)
from .krylov import Breakdown
from .mesh import MeshError, load_mesh, save_mesh
from .remesh import RemeshFailed, remesh
from .tangent_point import tp_density, tp_energy

logger = logging.getLogger(__name__)

__all__ = ["main"]

_COMPUTE_ERRORS = (NoConvergence, NoProgress, Breakdown, MeshError,
                   RemeshFailed, FloatingPointError)


def _env_default(name, fallback=None):
    return os.environ.get(f"SCATTER_{name}", fallback)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scatter",
        description="sound-soft scatterer reconstruction toolkit")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="path to the JSON run config")
    common.add_argument("--output", default=_env_default("OUTPUT"),
                        help="output directory (overrides config)")
    common.add_argument("--threads", type=int,
                        default=_env_default("THREADS"),
                        help="numba thread count")
    common.add_argument("--seed", type=int, default=_env_default("SEED"),
                        help="RNG seed (overrides config)")
    common.add_argument("--log-level",
                        default=_env_default("LOG_LEVEL", "info"),
                        choices=["debug", "info", "warning", "error"],
                        help="logging verbosity")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("validate-config", parents=[common],
                   help="check a config and print its normalized form")
    sub.add_parser("make-data", parents=[common],
                   help="synthesize noisy far-field data from the true "
                        "mesh")
    sub.add_parser("forward", parents=[common],
                   help="far field of the true mesh, binary + CSV export")
    sub.add_parser("reconstruct", parents=[common],
                   help="run the regularized Gauss-Newton reconstruction")
    report = sub.add_parser("report", parents=[common],
                            help="metrics and plot-ready exports for a "
                                 "finished run")
    report.add_argument("--run-dir", default=None,
                        help="run directory (default: the output dir)")
    sub.add_parser("energy", parents=[common],
                   help="tangent-point energy and density of a mesh")
    sub.add_parser("remesh", parents=[common],
                   help="remesh the initial mesh to the target edge "
                        "length")
    return parser


def _setup(args):
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        import numba
        numba.set_num_threads(max(1, int(args.threads)))
    cfg = load_config(args.config)
    if args.output is not None:
        cfg["output_dir"] = args.output
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg, key, verb):
    if key not in cfg:
        raise ConfigError(f"config key {key!r} is required by {verb!r}")
    return cfg[key]


def cmd_validate_config(args) -> int:
    cfg = _setup(args)
    sys.stdout.write(emit_config(cfg))
    return 0


def cmd_make_data(args) -> int:
    cfg = _setup(args)
    spec = _require(cfg, "true_mesh", "make-data")
    true_mesh = build_mesh(spec, base_dir=Path(args.config).parent)
    waves = build_waves(cfg, eta_override=cfg.get("eta_override"))
    grid = EvalGrid.from_icosphere(cfg["grid_level"])
    data = make_noisy_data(true_mesh, waves, grid, cfg["noise_percent"],
                           seed=cfg["seed"],
                           tol=cfg["solver"]["tol_forward"])
    out = _out_dir(cfg)
    ff_path = out / cfg["far_field_file"]
    save_far_field(data, ff_path)
    norm_f = grid_norm(grid, data.values)
    sidecar = {
        "delta": data.delta,
        "seed": cfg["seed"],
        "noise_percent": cfg["noise_percent"],
        "far_field_norm": norm_f,
        "n_waves": waves.n_waves,
        "grid_points": grid.n_points,
    }
    sidecar_path = ff_path.with_suffix(ff_path.suffix + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True)
                            + "\n")
    logger.info("wrote %s (delta %.6e) and %s", ff_path, data.delta,
                sidecar_path)
    return 0


def cmd_forward(args) -> int:
    cfg = _setup(args)
    spec = _require(cfg, "true_mesh", "forward")
    mesh = build_mesh(spec, base_dir=Path(args.config).parent)
    waves = build_waves(cfg, eta_override=cfg.get("eta_override"))
    grid = EvalGrid.from_icosphere(cfg["grid_level"])
    ff = BoundaryOperator(mesh, waves).far_field(
        grid, tol=cfg["solver"]["tol_forward"])
    out = _out_dir(cfg)
    ff_path = out / cfg["far_field_file"]
    save_far_field(ff, ff_path)
    far_field_to_csv(ff, ff_path.with_suffix(".csv"))
    logger.info("wrote %s and CSV export", ff_path)
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _setup(args)
    out = Path(cfg["output_dir"])
    ff_path = Path(cfg["far_field_file"])
    if not ff_path.is_absolute():
        ff_path = out / ff_path
    if not ff_path.exists():
        raise ConfigError(f"far-field data file not found: {ff_path}")
    data = load_far_field(ff_path)
    spec = _require(cfg, "initial_mesh", "reconstruct")
    initial = build_mesh(spec, base_dir=Path(args.config).parent)
    gn_config = build_gn_config(cfg)
    run_dir = out / "run"
    state = irgnm_run(initial, data, gn_config, run_dir=run_dir)
    logger.info("reconstruction stopped (%s) after %d records",
                state.stop_reason, len(state.records))
    if state.stop_reason == "discrepancy":
        return 0
    sys.stderr.write(f"reconstruction did not reach the discrepancy "
                     f"target: {state.stop_reason}\n")
    return 1


def cmd_report(args) -> int:
    cfg = _setup(args)
    out = Path(cfg["output_dir"])
    run_dir = Path(args.run_dir) if args.run_dir else out / "run"
    history_path = run_dir / "history.csv"
    if not history_path.exists():
        raise ConfigError(f"no history.csv under {run_dir}")
    with open(history_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{history_path} is empty")
    meshes = sorted(run_dir.glob("iter_*.obj"))
    final_mesh = load_mesh(meshes[-1])
    stop_reason = (run_dir / "stop_reason.txt").read_text().strip()
    wall_time = 0.0
    timings = run_dir / "timings.csv"
    if timings.exists():
        with open(timings, newline="") as fh:
            wall_time = sum(float(r["wall_time"])
                            for r in csv.DictReader(fh))
    snapshot = json.loads((run_dir / "config.json").read_text())
    delta = snapshot.get("noise_level", 0.0)
    final_residual = float(rows[-1]["residual"])
    metrics = {
        "iterations": int(rows[-1]["k"]),
        "records": len(rows),
        "stop_reason": stop_reason,
        "final_residual": final_residual,
        "delta": delta,
        "residual_over_delta": (final_residual / delta if delta > 0.0
                                else None),
        "final_energy": float(rows[-1]["energy"]),
        "wall_time_total": wall_time,
    }
    params = build_energy_params(cfg)
    density = tp_density(final_mesh, params)
    save_mesh(final_mesh, run_dir / "final_density.ply",
              face_scalars=density)
    if "true_mesh" in cfg:
        truth = build_mesh(cfg["true_mesh"],
                           base_dir=Path(args.config).parent)
        metrics["relative_hausdorff"] = relative_hausdorff(truth,
                                                           final_mesh)
        distances = signed_distance(truth, final_mesh.vertices)
        save_mesh(final_mesh, run_dir / "final_signed_distance.ply",
                  vertex_scalars=distances)
    metrics_path = run_dir / "metrics.json"
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True)
                            + "\n")
    sys.stdout.write(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_energy(args) -> int:
    cfg = _setup(args)
    spec = cfg.get("initial_mesh") or _require(cfg, "true_mesh", "energy")
    mesh = build_mesh(spec, base_dir=Path(args.config).parent)
    params = build_energy_params(cfg)
    value = tp_energy(mesh, params)
    density = tp_density(mesh, params)
    out = _out_dir(cfg)
    save_mesh(mesh, out / "density.ply", face_scalars=density)
    payload = {
        "energy": value,
        "p": params.p,
        "n_vertices": mesh.n_vertices,
        "n_triangles": mesh.n_triangles,
        "density_min": float(density.min()),
        "density_max": float(density.max()),
    }
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_remesh(args) -> int:
    cfg = _setup(args)
    spec = cfg.get("initial_mesh") or _require(cfg, "true_mesh", "remesh")
    mesh = build_mesh(spec, base_dir=Path(args.config).parent)
    target = cfg.get("remesh_target_edge", mesh.mean_edge_length)
    result = remesh(mesh, target,
                    smoothing_rounds=cfg["solver"]["smoothing_rounds"])
    out = _out_dir(cfg)
    save_mesh(result, out / "remeshed.obj")
    logger.info("remeshed %d -> %d triangles (target edge %.4g)",
                mesh.n_triangles, result.n_triangles, target)
    return 0


_VERBS = {
    "validate-config": cmd_validate_config,
    "make-data": cmd_make_data,
    "forward": cmd_forward,
    "reconstruct": cmd_reconstruct,
    "report": cmd_report,
    "energy": cmd_energy,
    "remesh": cmd_remesh,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _VERBS[args.verb](args)
    except ConfigError as err:
        sys.stderr.write(f"config error: {err}\n")
        return 2
    except _COMPUTE_ERRORS as err:
        sys.stderr.write(f"compute failure: {err}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
