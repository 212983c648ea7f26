"""Regularized Gauss-Newton reconstruction from far-field data.

The pieces, in pipeline order:

* :class:`ShapeDerivative` — the derivative of the boundary-to-far-field
  map at a fixed surface, and its exact discrete adjoint.  Both reuse one
  factorized boundary operator per wavenumber, so repeated applies (inside
  the update solve) cost a pair of triangular solves each.
* :func:`gauss_newton_direction` — solves the regularized normal equation
  ``(DF' J DF + alpha M) v = -(DF' J (F - g) + alpha dE)`` by
  preconditioned GMRES and certifies the result as a descent direction.
* :func:`line_search` — collision-gated Armijo backtracking.
* :func:`irgnm_run` — the outer loop: geometrically decaying
  regularization ``alpha_k = alpha0 * rho^k``, noise-level stopping
  ``|F(f_k) - g| < tau * delta``, occasional remeshing, and a run
  directory with per-iteration meshes and histories.
* :func:`make_noisy_data` — synthetic measurements with an exactly scaled,
  seeded Gaussian perturbation.

Vertex fields are ``(n_vertices, 3)`` float arrays throughout; far-field
blocks follow the wave ordering of the :class:`~scattershape.bem.WaveSet`.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bem import (
    BoundaryOperator,
    EvalGrid,
    FarField,
    ShapeMismatch,
    WaveSet,
    averaging_matrix,
    _farfield_rows_indirect,
)
from .collision import ccd_max_step
from .krylov import gmres
from .mesh import MeshError, TriangleMesh, face_geometry, save_mesh
from .remesh import remesh
from .tangent_point import (
    EnergyParams,
    FractionalPreconditioner,
    MetricOperator,
    tp_differential,
    tp_energy,
)

logger = logging.getLogger(__name__)

__all__ = [
    "GNConfig", "GNState", "StepRecord", "ShapeDerivative",
    "NotDescending", "StepTooSmall", "NoProgress",
    "apply_DF", "apply_DF_adjoint", "gauss_newton_direction",
    "line_search", "LineSearchResult", "irgnm_run", "make_noisy_data",
    "grid_norm",
]


class NotDescending(Exception):
    """Computed update direction failed the descent certificate.

    Carries the offending ``direction``, its ``slope`` against the
    objective gradient, and the GMRES ``report`` so the caller can fall
    back to preconditioned steepest descent.
    """

    def __init__(self, message, direction=None, slope=None, report=None):
        super().__init__(message)
        self.direction = direction
        self.slope = slope
        self.report = report


class StepTooSmall(Exception):
    """Armijo backtracking shrank the step below the configured floor."""


class NoProgress(Exception):
    """The outer iteration hit a stationary point: zero direction with the
    discrepancy still unmet.  Recorded in the run state before raising."""


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GNConfig:
    """Knobs of the outer Gauss-Newton iteration.

    ``tol_forward`` governs the far-field solves the objective depends on;
    ``tol_derivative`` and ``tol_update`` may be 1-2 orders looser, since
    they only steer the search direction.  ``alpha0``/``rho`` set the
    regularization schedule ``alpha_k = alpha0 * rho^k``; the iteration
    stops once the data residual falls below ``tau`` times the noise
    level.  Remeshing triggers every ``remesh_every`` accepted steps or
    when the max/min edge ratio exceeds ``edge_ratio_limit``, whichever
    comes first.

    ``stages``, when set, is a tuple of wavenumber-index groups: the run
    restarts its schedule once per group, seeing only those wavenumbers'
    data and warm-starting from the previous group's reconstruction (the
    usual ladder is lowest wavenumber first, then widening sets).
    """

    alpha0: float = 1e-3
    rho: float = 0.8
    tau: float = 2.0
    sigma_armijo: float = 1e-4
    max_iterations: int = 30
    tol_forward: float = 1e-6
    tol_derivative: float = 1e-2
    tol_update: float = 1e-2
    update_max_iter: int = 200
    min_step: float = 1e-8
    remesh_every: int = 8
    edge_ratio_limit: float = 10.0
    smoothing_rounds: int = 3
    energy: EnergyParams = field(default_factory=EnergyParams)
    stages: tuple = None

    def __post_init__(self):
        if not self.alpha0 > 0.0:
            raise ValueError("alpha0 must be positive")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if not self.tau > 1.0:
            raise ValueError("tau must exceed 1")
        if not 0.0 <= self.sigma_armijo < 1.0:
            raise ValueError("sigma_armijo must lie in [0, 1)")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")
        for name in ("tol_forward", "tol_derivative", "tol_update"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.tol_derivative < self.tol_forward:
            raise ValueError("tol_derivative must not be tighter than "
                             "tol_forward")
        if not self.min_step > 0.0:
            raise ValueError("min_step must be positive")
        if self.remesh_every < 1:
            raise ValueError("remesh_every must be at least 1")
        if not self.edge_ratio_limit > 1.0:
            raise ValueError("edge_ratio_limit must exceed 1")
        if self.stages is not None:
            normalized = tuple(tuple(int(i) for i in stage)
                               for stage in self.stages)
            if not normalized or any(not stage for stage in normalized):
                raise ValueError("stages must be nonempty index groups")
            object.__setattr__(self, "stages", normalized)


@dataclass
class StepRecord:
    """One accepted (or terminal) outer iteration.

    ``wall_time`` is excluded from history.csv so rerunning a seed
    reproduces the file byte-for-byte; timings land in timings.csv.
    """

    iteration: int
    alpha: float
    residual: float
    energy: float
    step: float
    gmres_iters: int
    descent_ok: bool = True
    fallback: bool = False
    ccd_cap: float = np.inf
    energy_bound_ok: bool = True
    wall_time: float = 0.0


@dataclass
class GNState:
    """Mutable trail of an outer run (histories are append-only).

    ``adjoint_gap`` holds the relative adjoint-consistency defect
    ``|<DF v, y> - <v, DF'y>| / scale`` measured on a seeded pair at each
    stage's first iterate — the standing self-test acceptance runs assert
    on.
    """

    mesh: TriangleMesh
    alpha: float
    iteration: int = 0
    records: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    stop_reason: str = ""
    adjoint_gap: float = np.nan

    @property
    def residuals(self):
        return [r.residual for r in self.records]

    @property
    def energies(self):
        return [r.energy for r in self.records]

    @property
    def steps(self):
        return [r.step for r in self.records]


# ---------------------------------------------------------------------------
# Far-field norms
# ---------------------------------------------------------------------------

def grid_norm(grid: EvalGrid, values) -> float:
    """Product-space L2 norm: quadrature over the sphere, sum over waves."""
    values = np.asarray(values)
    w = grid.weights if values.ndim == 1 else grid.weights[:, None]
    return float(np.sqrt(np.sum(w * np.abs(values) ** 2)))


# ---------------------------------------------------------------------------
# Shape derivative of the far-field map and its adjoint
# ---------------------------------------------------------------------------

class ShapeDerivative:
    """Derivative machinery of the far-field map at one fixed surface.

    A perturbation field v moves the sound-soft surface; first order in v,
    the scattered wave changes by the radiating solution with Dirichlet
    data ``-(du/dnu) <nu, v>``, where du/dnu is the normal derivative of
    the total field.  The derivative therefore factors through the same
    boundary solve as the forward map, with the geometry and du/dnu frozen
    at the current iterate: this class computes du/dnu once (transposed
    solve) and keeps the factorized boundary operator, making each
    derivative or adjoint apply a pair of triangular solves.

    The adjoint is the exact discrete transpose of :meth:`apply` between
    the Euclidean vertex pairing and the weighted far-field inner product
    (real pairing: ``Re sum_j w_j conj(y_j) a_j`` summed over waves), so
    ``<apply(v), y>_grid == <v, apply_adjoint(y)>`` holds to solver
    accuracy — with factorized solves, to rounding.
    """

    def __init__(self, mesh: TriangleMesh, waves: WaveSet, grid: EvalGrid,
                 tol_forward: float = 1e-6, operator: BoundaryOperator = None):
        self.mesh = mesh
        self.waves = waves
        self.grid = grid
        self.operator = operator if operator is not None \
            else BoundaryOperator(mesh, waves)
        areas, centers, normals = face_geometry(mesh)
        self._normals = normals
        self._av = averaging_matrix(mesh)
        psi = self.operator.normal_derivatives(tol=tol_forward)
        # solve_faces works in the area-absorbed density convention
        # (face value ~ area * pointwise density); the derivative data
        # needs the pointwise du/dnu, so divide the areas back out.
        self._q = (self._av @ psi) / areas[:, None]
        self._rows = [_farfield_rows_indirect(grid, kappa, eta, centers,
                                              normals)
                      for kappa, eta, _d, _c in waves.blocks()]

    def far_field(self, tol: float = 1e-6) -> FarField:
        """Forward far field at the frozen surface (shares the solves)."""
        return self.operator.far_field(self.grid, tol=tol)

    def _face_mean(self, v):
        return v[self.mesh.triangles].mean(axis=1)

    def apply(self, v, tol: float = 1e-2) -> FarField:
        """Far-field derivative in direction v (one column per wave)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.mesh.n_vertices, 3):
            raise ShapeMismatch(
                f"direction shape {v.shape}, expected "
                f"({self.mesh.n_vertices}, 3)")
        normal_speed = np.einsum("tk,tk->t", self._normals,
                                 self._face_mean(v))
        data = -self._q * normal_speed[:, None]
        phi, _reports = self.operator.solve_faces(data, tol=tol)
        w = self._av @ phi
        values = np.empty((self.grid.n_points, self.waves.n_waves),
                          dtype=np.complex128)
        for ell, (_k, _e, _d, cols) in enumerate(self.waves.blocks()):
            values[:, cols] = self._rows[ell] @ w[:, cols]
        return FarField(values, self.grid, self.waves)

    def apply_adjoint(self, y, tol: float = 1e-2):
        """Adjoint apply: far-field element y to a vertex field.

        Accepts a FarField or a raw (n_points, n_waves) complex array.
        """
        values = y.values if isinstance(y, FarField) else np.asarray(y)
        if values.shape != (self.grid.n_points, self.waves.n_waves):
            raise ShapeMismatch(
                f"far-field shape {values.shape}, expected "
                f"({self.grid.n_points}, {self.waves.n_waves})")
        weighted = self.grid.weights[:, None] * values
        data = np.empty((self.mesh.n_triangles, self.waves.n_waves),
                        dtype=np.complex128)
        for ell, (_k, _e, _d, cols) in enumerate(self.waves.blocks()):
            data[:, cols] = self._rows[ell].conj().T @ weighted[:, cols]
        x, _reports = self.operator.solve_faces(data, adjoint=True, tol=tol)
        z = self._av @ x
        scale = np.einsum("tl,tl->t", np.conj(-self._q), z).real
        face_vec = scale[:, None] * self._normals / 3.0
        out = np.zeros((self.mesh.n_vertices, 3))
        np.add.at(out, self.mesh.triangles.ravel(),
                  np.repeat(face_vec, 3, axis=0))
        return out


def apply_DF(mesh: TriangleMesh, waves: WaveSet, grid: EvalGrid, v,
             tol: float = 1e-2) -> FarField:
    """One-shot far-field derivative; solver loops should hold a
    ShapeDerivative and reuse its factorizations instead."""
    return ShapeDerivative(mesh, waves, grid).apply(v, tol=tol)


def apply_DF_adjoint(mesh: TriangleMesh, waves: WaveSet, grid: EvalGrid, y,
                     tol: float = 1e-2):
    """One-shot adjoint of the far-field derivative (see ShapeDerivative)."""
    return ShapeDerivative(mesh, waves, grid).apply_adjoint(y, tol=tol)


# ---------------------------------------------------------------------------
# Update direction
# ---------------------------------------------------------------------------

def _direction_system(derivative: ShapeDerivative, metric: MetricOperator,
                      residual_values, alpha: float, grad_energy,
                      config: GNConfig):
    """Assemble rhs covector and the normal-operator apply, both flattened."""
    n = derivative.mesh.n_vertices
    data_grad = derivative.apply_adjoint(residual_values,
                                         tol=config.tol_derivative)
    grad_j = data_grad + alpha * grad_energy

    def normal_apply(flat):
        v = flat.reshape(n, 3)
        dfv = derivative.apply(v, tol=config.tol_derivative)
        out = derivative.apply_adjoint(dfv, tol=config.tol_derivative)
        out += alpha * metric.apply(v)
        return out.ravel()

    return grad_j, normal_apply


def gauss_newton_direction(derivative: ShapeDerivative,
                           metric: MetricOperator,
                           precond: FractionalPreconditioner,
                           residual_values, alpha: float, grad_energy,
                           config: GNConfig):
    """Solve the regularized normal equation for the update direction.

    Returns ``(v, slope, report)`` where ``slope = <grad J, v> <= 0`` is
    the descent certificate (grad J is the covector the right-hand side
    negates).  A vanishing gradient returns v = 0 with a zero-iteration
    report; the caller decides whether a stationary point means done.
    Raises :class:`NotDescending` — with the direction attached — if
    inexact solves produced an ascent direction.
    """
    n = derivative.mesh.n_vertices
    grad_j, normal_apply = _direction_system(derivative, metric,
                                             residual_values, alpha,
                                             grad_energy, config)
    rhs = -grad_j.ravel()
    flat, report = gmres(normal_apply, rhs, tol=config.tol_update,
                         max_iter=config.update_max_iter,
                         precond=lambda r: precond.apply(
                             r.reshape(n, 3)).ravel())
    v = flat.reshape(n, 3)
    slope = float(np.sum(grad_j * v))
    if slope > 0.0:
        raise NotDescending(
            f"update direction has positive slope {slope:.3e}",
            direction=v, slope=slope, report=report)
    return v, slope, report


def steepest_descent_direction(precond: FractionalPreconditioner, grad_j):
    """Preconditioned steepest descent fallback: v = -P grad J."""
    v = -precond.apply(grad_j)
    return v, float(np.sum(grad_j * v))


# ---------------------------------------------------------------------------
# Line search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LineSearchResult:
    step: float
    cap: float          # collision-certified upper bound (exclusive)
    trials: int
    objective: float    # objective value at the accepted step


def line_search(mesh: TriangleMesh, v, objective, j0: float, slope: float,
                config: GNConfig) -> LineSearchResult:
    """Collision-gated Armijo backtracking along ``mesh + t*v``.

    ``objective`` maps a trial mesh to the scalar being minimized; ``j0``
    is its value at ``mesh`` and ``slope = <grad, v>`` the directional
    derivative (must be <= 0).  The first trial is ``min(1, 0.9*t_max)``
    with ``t_max`` from conservative collision detection, so no trial —
    and in particular no accepted step — can self-intersect.  Trial meshes
    that violate mesh invariants count as failed trials.  Halves until
    ``objective <= j0 + sigma * t * slope``.

    Raises StepTooSmall once t drops below ``config.min_step``.
    """
    if slope > 0.0:
        raise ValueError("line search requires a descent direction")
    cap = ccd_max_step(mesh, v)
    t = min(1.0, 0.9 * cap)
    if not t > 0.0:
        raise StepTooSmall("collision gate leaves no room to move")
    verts = mesh.vertices
    trials = 0
    while True:
        if t < config.min_step:
            raise StepTooSmall(
                f"step {t:.3e} below floor {config.min_step:.1e} "
                f"after {trials} trials")
        trials += 1
        try:
            trial = mesh.with_vertices(verts + t * v)
            trial.validate()
            value = objective(trial)
        except MeshError:
            t *= 0.5
            continue
        if value <= j0 + config.sigma_armijo * t * slope:
            return LineSearchResult(step=t, cap=cap, trials=trials,
                                    objective=value)
        t *= 0.5


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def make_noisy_data(true_mesh: TriangleMesh, waves: WaveSet, grid: EvalGrid,
                    noise_percent: float, seed: int,
                    tol: float = 1e-6, method: str = "auto") -> FarField:
    """Far field of ``true_mesh`` plus scaled complex Gaussian noise.

    The perturbation has independent real and imaginary parts and is
    rescaled so its grid norm is exactly ``noise_percent/100`` of the
    clean signal's; that norm is stored as the noise level ``delta``.
    Deterministic for a fixed seed.  Pass a WaveSet with off-default
    coupling (for example eta = 1) to decouple the data discretization
    from the one used in inversion.
    """
    if noise_percent < 0.0:
        raise ValueError("noise_percent must be nonnegative")
    clean = BoundaryOperator(true_mesh, waves, method=method).far_field(
        grid, tol=tol)
    if noise_percent == 0.0:
        return FarField(clean.values.copy(), grid, waves, delta=0.0)
    rng = np.random.default_rng(seed)
    shape = clean.values.shape
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    target = (noise_percent / 100.0) * grid_norm(grid, clean.values)
    noise *= target / grid_norm(grid, noise)
    return FarField(clean.values + noise, grid, waves, delta=target)


# ---------------------------------------------------------------------------
# Outer iteration
# ---------------------------------------------------------------------------

def _edge_ratio(mesh: TriangleMesh) -> float:
    lengths = mesh.edge_lengths
    return float(lengths.max() / lengths.min())


def _select_wavenumbers(data: FarField, indices) -> FarField:
    """Restrict a far field to the given wavenumber indices (noise level
    scales with the square root of the retained column fraction, matching
    the product-space norm)."""
    waves = data.waves
    indices = list(indices)
    D = waves.n_directions
    cols = np.concatenate([np.arange(ell * D, (ell + 1) * D)
                           for ell in indices])
    sub = WaveSet(waves.kappas[indices], waves.directions[indices],
                  waves.etas[indices])
    delta = data.delta
    if delta is not None:
        delta = delta * np.sqrt(len(cols) / waves.n_waves)
    return FarField(data.values[:, cols], data.grid, sub, delta=delta)


def _adjoint_gap(derivative: ShapeDerivative, tol: float) -> float:
    """Relative adjoint-consistency defect on one seeded (v, y) pair."""
    rng = np.random.default_rng(0)
    grid, waves = derivative.grid, derivative.waves
    v = rng.standard_normal((derivative.mesh.n_vertices, 3))
    y = (rng.standard_normal((grid.n_points, waves.n_waves))
         + 1j * rng.standard_normal((grid.n_points, waves.n_waves)))
    dfv = derivative.apply(v, tol=tol).values
    lhs = float(np.sum(grid.weights[:, None] * np.conj(y) * dfv).real)
    rhs = float(np.sum(v * derivative.apply_adjoint(y, tol=tol)))
    scale = grid_norm(grid, dfv) * grid_norm(grid, y) + abs(lhs)
    return abs(lhs - rhs) / scale


def _write_history(path: Path, records):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["k", "alpha", "residual", "energy", "step",
                         "gmres_iters"])
        for r in records:
            writer.writerow([r.iteration, f"{r.alpha:.17g}",
                             f"{r.residual:.17g}", f"{r.energy:.17g}",
                             f"{r.step:.17g}", r.gmres_iters])


def _write_timings(path: Path, records):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["k", "wall_time"])
        for r in records:
            writer.writerow([r.iteration, f"{r.wall_time:.6f}"])


def _snapshot_config(path: Path, config: GNConfig, delta: float):
    payload = dataclasses.asdict(config)
    payload["energy"] = {"p": config.energy.p,
                         "include_adjacent": config.energy.include_adjacent}
    payload["noise_level"] = delta
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def irgnm_run(initial_mesh: TriangleMesh, data, config: GNConfig = None,
              run_dir=None) -> GNState:
    """Iteratively regularized Gauss-Newton reconstruction.

    ``data`` is a FarField with its noise level ``delta`` set (see
    :func:`make_noisy_data`), or a sequence of them for staged runs where
    each stage warm-starts from the previous reconstruction (histories
    concatenate; iteration counters restart per stage).  The inversion
    always uses the default coupling (eta = kappa) regardless of the eta
    the data were generated with.

    Per iteration: forward far field and residual; stop if below
    ``tau * delta``; otherwise solve for the update direction at
    ``alpha_k = alpha0 * rho^k`` (falling back to preconditioned steepest
    descent if the certificate fails), take a collision-gated Armijo step,
    and occasionally remesh.  When ``run_dir`` is given, writes
    ``config.json``, ``iter_%04d.obj``, ``history.csv`` (deterministic
    columns only), ``timings.csv``, and ``stop_reason.txt``.

    Returns the final :class:`GNState`; solver failures are recorded in
    ``stop_reason`` before being re-raised.
    """
    if config is None:
        config = GNConfig()
    if isinstance(data, (list, tuple)):
        stages = list(data)
    elif config.stages is not None:
        stages = [_select_wavenumbers(data, group)
                  for group in config.stages]
    else:
        stages = [data]
    out_dir = None
    if run_dir is not None:
        out_dir = Path(run_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _snapshot_config(out_dir / "config.json", config,
                         sum(stage.delta or 0.0 for stage in stages))

    state = GNState(mesh=initial_mesh, alpha=config.alpha0)
    state.meshes.append(initial_mesh)
    if out_dir is not None:
        save_mesh(initial_mesh, out_dir / "iter_0000.obj")

    try:
        for stage_index, stage in enumerate(stages):
            waves = WaveSet(stage.waves.kappas, stage.waves.directions)
            _run_stage(state, stage, waves, config, out_dir, stage_index)
            if state.stop_reason == "step_too_small":
                break
    finally:
        if out_dir is not None:
            _write_history(out_dir / "history.csv", state.records)
            _write_timings(out_dir / "timings.csv", state.records)
            with open(out_dir / "stop_reason.txt", "w") as handle:
                handle.write(state.stop_reason + "\n")
    return state


def _run_stage(state: GNState, data: FarField, waves: WaveSet,
               config: GNConfig, out_dir, stage_index: int):
    grid = data.grid
    delta = data.delta or 0.0
    threshold = config.tau * delta
    mesh_counter = len(state.meshes) - 1

    for k in range(config.max_iterations + 1):
        started = time.perf_counter()
        alpha = config.alpha0 * config.rho ** k
        state.alpha = alpha
        state.iteration = k
        mesh = state.mesh

        derivative = ShapeDerivative(mesh, waves, grid,
                                     tol_forward=config.tol_forward)
        if k == 0:
            state.adjoint_gap = _adjoint_gap(derivative,
                                             config.tol_derivative)
            logger.info("stage %d adjoint self-test: relative gap %.3e",
                        stage_index, state.adjoint_gap)
        far = derivative.far_field(tol=config.tol_forward)
        residual_values = far.values - data.values
        residual = grid_norm(grid, residual_values)
        energy = tp_energy(mesh, config.energy)

        if residual < threshold:
            state.records.append(StepRecord(
                iteration=k, alpha=alpha, residual=residual, energy=energy,
                step=0.0, gmres_iters=0,
                wall_time=time.perf_counter() - started))
            state.stop_reason = "discrepancy"
            logger.info("stage %d: discrepancy reached at iteration %d "
                        "(%.3e < %.3e)", stage_index, k, residual, threshold)
            return
        if k == config.max_iterations:
            state.records.append(StepRecord(
                iteration=k, alpha=alpha, residual=residual, energy=energy,
                step=0.0, gmres_iters=0,
                wall_time=time.perf_counter() - started))
            state.stop_reason = "max_iterations"
            logger.info("stage %d: iteration budget exhausted at residual "
                        "%.3e (threshold %.3e)", stage_index, residual,
                        threshold)
            return

        metric = MetricOperator(mesh, config.energy)
        precond = FractionalPreconditioner(mesh, config.energy)
        grad_energy = tp_differential(mesh, config.energy)

        descent_ok = True
        fallback = False
        try:
            v, slope, report = gauss_newton_direction(
                derivative, metric, precond, residual_values, alpha,
                grad_energy, config)
            gmres_iters = report.iterations
        except NotDescending as err:
            logger.warning("iteration %d: %s; falling back to "
                           "preconditioned steepest descent", k, err)
            descent_ok = False
            fallback = True
            grad_j = (derivative.apply_adjoint(residual_values,
                                               tol=config.tol_derivative)
                      + alpha * grad_energy)
            v, slope = steepest_descent_direction(precond, grad_j)
            gmres_iters = err.report.iterations if err.report else 0

        if not np.any(v):
            state.records.append(StepRecord(
                iteration=k, alpha=alpha, residual=residual, energy=energy,
                step=0.0, gmres_iters=0,
                wall_time=time.perf_counter() - started))
            state.stop_reason = "no_progress"
            logger.error("stage %d: stationary at iteration %d with "
                         "residual %.3e above threshold %.3e", stage_index,
                         k, residual, threshold)
            raise NoProgress(
                f"zero update direction at iteration {k} with the "
                f"discrepancy unmet ({residual:.3e} >= {threshold:.3e})")

        def objective(trial_mesh):
            trial_far = BoundaryOperator(trial_mesh, waves).far_field(
                grid, tol=config.tol_forward)
            misfit = grid_norm(grid, trial_far.values - data.values)
            return 0.5 * misfit ** 2 + alpha * tp_energy(trial_mesh,
                                                         config.energy)

        j0 = 0.5 * residual ** 2 + alpha * energy
        try:
            found = line_search(mesh, v, objective, j0, slope, config)
        except StepTooSmall as err:
            state.records.append(StepRecord(
                iteration=k, alpha=alpha, residual=residual, energy=energy,
                step=0.0, gmres_iters=gmres_iters, descent_ok=descent_ok,
                fallback=fallback,
                wall_time=time.perf_counter() - started))
            state.stop_reason = "step_too_small"
            logger.warning("stage %d halted at iteration %d: %s",
                           stage_index, k, err)
            return

        new_mesh = mesh.with_vertices(mesh.vertices + found.step * v)
        new_mesh.validate()
        # Armijo with slope <= 0 gives J(new) <= J(old), which bounds the
        # energy of the accepted iterate by (J(old) - misfit(new))/alpha.
        bound_ok = bool(found.objective <= j0 + 1e-12 * max(1.0, abs(j0)))

        if (k + 1) % config.remesh_every == 0 \
                or _edge_ratio(new_mesh) > config.edge_ratio_limit:
            new_mesh = remesh(new_mesh, new_mesh.mean_edge_length,
                              smoothing_rounds=config.smoothing_rounds)
            logger.info("iteration %d: remeshed to %d triangles", k,
                        new_mesh.n_triangles)

        state.mesh = new_mesh
        state.meshes.append(new_mesh)
        mesh_counter += 1
        if out_dir is not None:
            save_mesh(new_mesh, out_dir / f"iter_{mesh_counter:04d}.obj")
        state.records.append(StepRecord(
            iteration=k, alpha=alpha, residual=residual, energy=energy,
            step=found.step, gmres_iters=gmres_iters, descent_ok=descent_ok,
            fallback=fallback, ccd_cap=found.cap, energy_bound_ok=bound_ok,
            wall_time=time.perf_counter() - started))
        logger.info("iteration %d: residual %.4e energy %.4e alpha %.3e "
                    "step %.3f (%d gmres its)", k, residual, energy, alpha,
                    found.step, gmres_iters)
