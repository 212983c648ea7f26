"""Acoustic boundary elements: layer operators, solves, far fields.

Sound-soft scattering of plane waves e^{ik<x,d>} off a closed surface,
discretized with a piecewise-linear Galerkin scheme and barycenter midpoint
quadrature.  The combined-field equation

    (1/2 I - i eta V + K) phi = -u_i|_surface

is solved for the indirect density phi, normal derivatives come from the
transposed (direct) equation, and far fields are midpoint sums of the
radiating representation.

Discrete structure: with Av the area-weighted vertex-to-face averaging
((Av phi)(t) = integral of phi over t, exact for piecewise-linear phi), each
boundary operator is a face-space kernel matrix C, applied as Av^T C Av on
vertex coefficient vectors.  Off-diagonal kernel entries are assembled on
the fly in square tiles reused across all right-hand sides of one
wavenumber and never materialized (``blocked_multiwave_product``); a dense
numpy assembler provides the independent naive route the blocked one is
tested against.

Row tiles are processed in parallel with exclusive output-row ownership and
a fixed inner summation order, so results are bit-identical across thread
counts.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange
from scipy import sparse

from scattershape.krylov import SolveReport, gmres_family
from scattershape.mesh import DegenerateFace, TriangleMesh, face_geometry, icosphere

logger = logging.getLogger(__name__)

__all__ = [
    "CoincidentPoints", "ShapeMismatch", "BlockTooWide", "NoConvergence",
    "WaveSet", "EvalGrid", "FarField",
    "fundamental_solution", "singular_self_integral", "averaging_matrix",
    "dense_face_operator", "blocked_multiwave_product",
    "apply_layer_operators", "BoundaryOperator",
    "solve_boundary_system", "solve_indirect",
    "solve_direct", "forward_far_field", "far_field_from_normal_derivative",
    "farfield_inner", "save_far_field", "load_far_field", "far_field_to_csv",
]

_MAX_BLOCK_WIDTH = 16
_GMRES_CAP = 500

_KERNEL_CODES = {
    "single_layer": 0,
    "double_layer": 1,
    "double_layer_transposed": 2,
    "combined": 3,
    "combined_transposed": 4,
}


class CoincidentPoints(Exception):
    """Fundamental solution evaluated at x = y."""


class ShapeMismatch(Exception):
    """Inconsistent array shapes between mesh, waves, and densities."""


class BlockTooWide(Exception):
    """More simultaneous right-hand sides than the configured block width."""


class NoConvergence(Exception):
    """A GMRES solve hit its iteration cap.

    The best iterates and their reports are attached as ``result`` and
    ``reports``.
    """

    def __init__(self, message, result=None, reports=None):
        super().__init__(message)
        self.result = result
        self.reports = reports


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WaveSet:
    """Incident plane waves: L wavenumbers with D unit directions each.

    ``etas`` holds the combined-field coupling parameter per wavenumber and
    defaults to the wavenumber itself; synthetic-data generation may
    override it (e.g. to 1) so that inversion runs never share it.
    Wave columns are ordered (kappa_1: d_1..d_D), (kappa_2: d_1..d_D), ...
    """

    kappas: np.ndarray
    directions: np.ndarray
    etas: np.ndarray = None

    def __post_init__(self):
        kappas = np.atleast_1d(np.asarray(self.kappas, dtype=np.float64))
        directions = np.asarray(self.directions, dtype=np.float64)
        if directions.ndim == 2:
            directions = np.broadcast_to(
                directions[None], (len(kappas),) + directions.shape).copy()
        if directions.ndim != 3 or directions.shape[2] != 3 \
                or directions.shape[0] != len(kappas):
            raise ShapeMismatch(
                f"directions must be (L, D, 3), got {directions.shape}")
        etas = self.etas
        etas = kappas.copy() if etas is None else \
            np.atleast_1d(np.asarray(etas, dtype=np.float64))
        if etas.shape != kappas.shape:
            raise ShapeMismatch("one eta per wavenumber required")
        if np.any(kappas <= 0.0):
            raise ValueError("wavenumbers must be positive")
        if np.any(etas <= 0.0):
            raise ValueError("coupling parameters must be positive")
        norms = np.linalg.norm(directions, axis=2)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("incident directions must be unit vectors")
        for name, value in (("kappas", kappas), ("directions", directions),
                            ("etas", etas)):
            value.flags.writeable = False
            object.__setattr__(self, name, value)

    @property
    def n_wavenumbers(self) -> int:
        return len(self.kappas)

    @property
    def n_directions(self) -> int:
        return self.directions.shape[1]

    @property
    def n_waves(self) -> int:
        return self.n_wavenumbers * self.n_directions

    def blocks(self):
        """Yield (kappa, eta, directions (D, 3), column slice) per wavenumber."""
        D = self.n_directions
        for ell in range(self.n_wavenumbers):
            yield (float(self.kappas[ell]), float(self.etas[ell]),
                   self.directions[ell], slice(ell * D, (ell + 1) * D))

    def columns(self):
        """Yield (kappa, eta, direction) per wave column, in column order."""
        for kappa, eta, dirs, _cols in self.blocks():
            for d in dirs:
                yield kappa, eta, d


@dataclass(frozen=True)
class EvalGrid:
    """Far-field evaluation directions on the unit sphere with weights."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 \
                or weights.shape != (len(points),):
            raise ShapeMismatch("grid needs (n, 3) points and (n,) weights")
        if np.any(np.abs(np.linalg.norm(points, axis=1) - 1.0) > 1e-12):
            raise ValueError("evaluation points must lie on the unit sphere")
        if np.any(weights <= 0.0):
            raise ValueError("weights must be positive")
        total = weights.sum()
        if abs(total - 4.0 * np.pi) > 1e-9 * 4.0 * np.pi:
            raise ValueError(f"weights must sum to 4*pi, got {total!r}")
        points.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_icosphere(cls, level: int) -> "EvalGrid":
        """Uniform weights 4*pi/n on the vertices of an icosphere."""
        pts = icosphere(level, 1.0).vertices
        return cls(pts, np.full(len(pts), 4.0 * np.pi / len(pts)))

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass
class FarField:
    """Far-field samples, one column per wave, plus provenance."""

    values: np.ndarray
    grid: EvalGrid
    waves: WaveSet
    delta: float = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != (self.grid.n_points, self.waves.n_waves):
            raise ShapeMismatch(
                f"values shape {self.values.shape} does not match "
                f"{self.grid.n_points} points x {self.waves.n_waves} waves")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("far field contains non-finite entries")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def fundamental_solution(x, y, kappa):
    """Outgoing free-space kernel e^{ik r}/(4 pi r), r = |x - y|.

    Vectorizes over leading dimensions of x and y.  kappa = 0 gives the
    static 1/(4 pi r) kernel.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = np.linalg.norm(x - y, axis=-1)
    if np.any(r == 0.0):
        raise CoincidentPoints("fundamental solution requires x != y")
    return np.exp(1j * kappa * r) / (4.0 * np.pi * r)


def singular_self_integral(triangle):
    """Integral of 1/|m - y| over a triangle, m its barycenter.

    Split at the barycenter into three subtriangles; over each, the polar
    integral has the closed form h * (atanh(cos a) + atanh(cos b)) with h
    the barycenter-to-edge distance and a, b the angles the edge makes with
    the two barycenter rays.  Scales linearly with the triangle.
    """
    tri = np.asarray(triangle, dtype=np.float64)
    if tri.shape != (3, 3):
        raise ShapeMismatch("triangle must be three 3D vertices")
    return float(_self_integrals(tri[None, 0], tri[None, 1], tri[None, 2])[0])


def _self_integrals(x0, x1, x2):
    """Vectorized singular self-integrals for corner arrays (n, 3)."""
    m = (x0 + x1 + x2) / 3.0
    total = np.zeros(len(m))
    for a, b in ((x0, x1), (x1, x2), (x2, x0)):
        ea = a - m
        eb = b - m
        ab = b - a
        lab = np.linalg.norm(ab, axis=1)
        if np.any(lab == 0.0):
            raise DegenerateFace("triangle with coincident vertices")
        h = np.linalg.norm(np.cross(ea, eb), axis=1) / lab
        if np.any(h <= 0.0):
            raise DegenerateFace("degenerate subtriangle in self-integral")
        # angles between the edge and the rays to the barycenter
        cos_alpha = np.einsum("ij,ij->i", -ea, ab) \
            / (np.linalg.norm(ea, axis=1) * lab)
        cos_beta = np.einsum("ij,ij->i", eb, ab) \
            / (np.linalg.norm(eb, axis=1) * lab)
        total += h * (np.arctanh(cos_alpha) + np.arctanh(cos_beta))
    return total


def averaging_matrix(mesh: TriangleMesh):
    """Sparse vertex-to-face map with (Av phi)(t) = integral of phi over t."""
    nt, nv = mesh.n_triangles, mesh.n_vertices
    rows = np.repeat(np.arange(nt), 3)
    cols = mesh.triangles.ravel()
    vals = np.repeat(mesh.face_areas / 3.0, 3)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(nt, nv))


def _combined_diagonal(mesh: TriangleMesh, kappa: float, eta: float):
    """Face-space diagonal of 1/2 I - i eta V (K and K' vanish there)."""
    areas = mesh.face_areas
    x0, x1, x2 = mesh.corner_vertices
    sing = _self_integrals(x0, x1, x2)
    v_diag = sing / (4.0 * np.pi * areas) + 1j * kappa / (4.0 * np.pi)
    return 1.0 / (2.0 * areas) - 1j * eta * v_diag


def _operator_diagonal(mesh, kappa, eta, kernel):
    if kernel in ("combined", "combined_transposed"):
        return _combined_diagonal(mesh, kappa, eta)
    if kernel == "single_layer":
        areas = mesh.face_areas
        x0, x1, x2 = mesh.corner_vertices
        sing = _self_integrals(x0, x1, x2)
        return sing / (4.0 * np.pi * areas) + 1j * kappa / (4.0 * np.pi) \
            + np.zeros(len(areas), dtype=np.complex128)
    return np.zeros(mesh.n_triangles, dtype=np.complex128)


# ---------------------------------------------------------------------------
# Face-kernel products: naive dense route and blocked matrix-free route
# ---------------------------------------------------------------------------

def dense_face_operator(mesh: TriangleMesh, kappa: float, eta: float,
                        kernel: str = "combined"):
    """Dense face-space operator matrix (the naive assembly route).

    The straightforward reference the blocked product is checked against,
    and the assembly route behind direct factorizations.  Rows are filled
    in chunks so peak memory stays near the output matrix itself; it is
    still quadratic in the face count.
    """
    if kernel not in _KERNEL_CODES:
        raise ValueError(f"unknown kernel {kernel!r}")
    _areas, centers, normals = face_geometry(mesh)
    nt = len(centers)
    A = np.empty((nt, nt), dtype=np.complex128)
    chunk = max(1, min(nt, (1 << 22) // nt))
    for r0 in range(0, nt, chunk):
        r1 = min(r0 + chunk, nt)
        diff = centers[None, :, :] - centers[r0:r1, None, :]  # (row, col, 3)
        r = np.linalg.norm(diff, axis=2)
        r[np.arange(r1 - r0), np.arange(r0, r1)] = 1.0
        phase = np.exp(1j * kappa * r)
        single = phase / (4.0 * np.pi * r)
        if kernel == "single_layer":
            A[r0:r1] = single
        else:
            grad = phase * (1j * kappa * r - 1.0) / (4.0 * np.pi * r ** 3)
            # <y - x, nu(y)>: y is the column barycenter for K, the row
            # one (with the sign absorbed by the difference) for K'
            if kernel in ("double_layer", "combined"):
                dots = np.einsum("rcs,cs->rc", diff, normals)
            else:
                dots = -np.einsum("rcs,rs->rc", diff, normals[r0:r1])
            if kernel in ("double_layer", "double_layer_transposed"):
                A[r0:r1] = grad * dots
            else:
                A[r0:r1] = -1j * eta * single + grad * dots
    A[np.arange(nt), np.arange(nt)] = \
        _operator_diagonal(mesh, kappa, eta, kernel)
    return A


@njit(cache=True, parallel=True)
def _tiled_product(centers, normals, diag, kappa, eta, code, conjugate,
                   X, tile):  # pragma: no cover - exercised via wrapper
    nt = centers.shape[0]
    d = X.shape[1]
    out = np.zeros((nt, d), dtype=np.complex128)
    n_row_tiles = (nt + tile - 1) // tile
    inv4pi = 1.0 / (4.0 * np.pi)
    for rt in prange(n_row_tiles):
        r0 = rt * tile
        r1 = min(r0 + tile, nt)
        A = np.empty((r1 - r0, tile), dtype=np.complex128)
        for c0 in range(0, nt, tile):
            c1 = min(c0 + tile, nt)
            for i in range(r0, r1):
                for j in range(c0, c1):
                    if i == j:
                        A[i - r0, j - c0] = diag[i]
                        continue
                    dx = centers[j, 0] - centers[i, 0]
                    dy = centers[j, 1] - centers[i, 1]
                    dz = centers[j, 2] - centers[i, 2]
                    rr = np.sqrt(dx * dx + dy * dy + dz * dz)
                    phase = complex(np.cos(kappa * rr), np.sin(kappa * rr))
                    val = 0.0 + 0.0j
                    if code == 0:
                        val = phase * (inv4pi / rr)
                    elif code >= 3:
                        val = (-1j * eta) * phase * (inv4pi / rr)
                    if code == 1 or code == 3:
                        dot = (dx * normals[j, 0] + dy * normals[j, 1]
                               + dz * normals[j, 2])
                        val = val + phase * (1j * kappa * rr - 1.0) \
                            * (inv4pi / (rr * rr * rr)) * dot
                    elif code == 2 or code == 4:
                        dot = -(dx * normals[i, 0] + dy * normals[i, 1]
                                + dz * normals[i, 2])
                        val = val + phase * (1j * kappa * rr - 1.0) \
                            * (inv4pi / (rr * rr * rr)) * dot
                    if conjugate:
                        val = np.conj(val)
                    A[i - r0, j - c0] = val
            for i in range(r1 - r0):
                for j in range(c1 - c0):
                    a_ij = A[i, j]
                    for q in range(d):
                        out[r0 + i, q] += a_ij * X[c0 + j, q]
    return out


def blocked_multiwave_product(mesh: TriangleMesh, kappa: float, eta: float,
                              rhs_block, kernel: str = "combined",
                              tile: int = 32, conjugate: bool = False,
                              max_block_width: int = _MAX_BLOCK_WIDTH):
    """Face-space operator times an |T| x D block, tiles assembled on the fly.

    Square kernel tiles are built in registers/cache and reused across all D
    columns, which is where the batched speedup over D separate products
    comes from; the full matrix is never materialized.  ``conjugate``
    conjugates every kernel entry (combined with the transposed kernels this
    yields the Hermitian adjoint applications the inverse solver needs).

    Equal to ``dense_face_operator(...) @ rhs_block`` to 1e-12 relative.
    """
    if kernel not in _KERNEL_CODES:
        raise ValueError(f"unknown kernel {kernel!r}")
    block = np.ascontiguousarray(rhs_block, dtype=np.complex128)
    if block.ndim == 1:
        block = block[:, None]
    if block.shape[0] != mesh.n_triangles:
        raise ShapeMismatch(
            f"rhs block has {block.shape[0]} rows for "
            f"{mesh.n_triangles} faces")
    if block.shape[1] > max_block_width:
        raise BlockTooWide(
            f"{block.shape[1]} right-hand sides > width {max_block_width}")
    if tile < 1:
        raise ValueError("tile must be >= 1")
    _areas, centers, normals = face_geometry(mesh)
    diag = np.ascontiguousarray(
        _operator_diagonal(mesh, kappa, eta, kernel), dtype=np.complex128)
    if conjugate:
        diag = np.conj(diag)
    return _tiled_product(np.ascontiguousarray(centers),
                          np.ascontiguousarray(normals), diag,
                          float(kappa), float(eta),
                          _KERNEL_CODES[kernel], bool(conjugate),
                          block, int(tile))


def apply_layer_operators(mesh: TriangleMesh, waves: WaveSet, densities,
                          which: str):
    """Galerkin weak-form image of V, K, or K' on per-vertex densities.

    Densities are averaged to faces (Av), run through the face kernel of
    the requested operator, and distributed back to vertices with Av^T, so
    the output is the weak-form vector <hat_v, Op(phi)> per vertex.  One
    column per wave; kernel assembly is shared within a wavenumber.
    """
    kernel = {"V": "single_layer", "K": "double_layer",
              "K'": "double_layer_transposed"}.get(which)
    if kernel is None:
        raise ValueError(f"which must be V, K, or K', got {which!r}")
    phi = np.asarray(densities, dtype=np.complex128)
    squeeze = phi.ndim == 1
    if squeeze:
        phi = phi[:, None]
    if phi.shape != (mesh.n_vertices, waves.n_waves):
        raise ShapeMismatch(
            f"densities shape {phi.shape}, expected "
            f"({mesh.n_vertices}, {waves.n_waves})")
    Av = averaging_matrix(mesh)
    out = np.empty_like(phi)
    for kappa, eta, _dirs, cols in waves.blocks():
        w = Av @ phi[:, cols]
        out[:, cols] = Av.T @ blocked_multiwave_product(
            mesh, kappa, eta, w, kernel=kernel)
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# Boundary solves
# ---------------------------------------------------------------------------

_DENSE_LIMIT = 6000


def _incident_at(points, kappa, d):
    return np.exp(1j * kappa * (points @ d))


class BoundaryOperator:
    """Discrete combined-field systems for one mesh and wave set.

    The vertex-space Galerkin matrix is S = Av^T C Av with C the
    combined-field face kernel.  The transposed-kernel (direct) system
    matrix equals S^T exactly, so one factorization per wavenumber serves
    the indirect, direct, and both Hermitian-adjoint solves.  Below
    ``dense_limit`` faces S is assembled and LU-factorized once (the
    economical choice at desk scale, where S is small and solves repeat);
    above it solves fall back to capped matrix-free GMRES over blocked
    kernel products.

    Reuse one instance when solving repeatedly on the same surface (the
    shape-derivative applies of the inverse solver do); the factorization
    cost is then paid once.
    """

    def __init__(self, mesh: TriangleMesh, waves: WaveSet,
                 method: str = "auto", tile: int = 32,
                 dense_limit: int = _DENSE_LIMIT):
        if method == "auto":
            method = "direct" if mesh.n_triangles <= dense_limit else "gmres"
        if method not in ("direct", "gmres"):
            raise ValueError(f"unknown method {method!r}")
        self.mesh = mesh
        self.waves = waves
        self.method = method
        self.tile = tile
        self._Av = averaging_matrix(mesh)
        self._lu = []
        self._S = []
        if method == "direct":
            from scipy.linalg import lu_factor
            for kappa, eta, _dirs, _cols in waves.blocks():
                C = dense_face_operator(mesh, kappa, eta, "combined")
                T = self._Av.T @ C
                del C
                S = (self._Av.T @ T.T).T
                del T
                self._lu.append(lu_factor(S))
                self._S.append(S)
            logger.info("factorized %d boundary system(s) of size %d",
                        waves.n_wavenumbers, mesh.n_vertices)

    def _apply_gmres(self, kappa, eta, transposed, adjoint):
        kernel = "combined_transposed" if (transposed != adjoint) \
            else "combined"

        def apply(block):
            w = self._Av @ block
            y = blocked_multiwave_product(self.mesh, kappa, eta, w,
                                          kernel=kernel, tile=self.tile,
                                          conjugate=adjoint)
            return self._Av.T @ y

        return apply

    def _solve_dense(self, ell, b, transposed, adjoint):
        from scipy.linalg import lu_solve

        if transposed and adjoint:
            # conj(S) x = b  <=>  conj(S conj(x)) = b
            x = np.conj(lu_solve(self._lu[ell], np.conj(b), trans=0))
            res = np.conj(self._S[ell] @ np.conj(x)) - b
        else:
            trans = 1 if transposed else (2 if adjoint else 0)
            x = lu_solve(self._lu[ell], b, trans=trans)
            if trans == 0:
                res = self._S[ell] @ x - b
            elif trans == 1:
                res = (x.T @ self._S[ell]).T - b
            else:
                res = (x.conj().T @ self._S[ell]).conj().T - b
        bnorm = np.linalg.norm(b, axis=0)
        rel = np.divide(np.linalg.norm(res, axis=0),
                        bnorm, out=np.zeros_like(bnorm), where=bnorm > 0)
        reports = [SolveReport(0, float(r), True) for r in rel]
        return x, reports

    def solve_faces(self, face_rhs, transposed: bool = False,
                    adjoint: bool = False, tol: float = 1e-8,
                    max_iter: int = _GMRES_CAP):
        """Solve the boundary system for face-midpoint data.

        face_rhs holds r(t) = boundary data at the barycenter of face t,
        one column per wave; the weak-form right-hand side is Av^T r.
        ``transposed`` selects the direct (K') equation, ``adjoint`` the
        Hermitian adjoint used by derivative transposes.  Factorized
        systems report zero iterations and the true relative residual;
        GMRES systems solve all columns of a wavenumber in lockstep,
        sharing kernel assembly, with ``tol`` and ``max_iter`` applying
        per column.

        Returns (vertex solution (n_vertices, n_waves), list of
        SolveReports, one per wave column).

        Raises NoConvergence (results attached) if a GMRES column hits the
        iteration cap.
        """
        if not tol > 0.0:
            raise ValueError("tol must be positive")
        rhs = np.asarray(face_rhs, dtype=np.complex128)
        if rhs.shape != (self.mesh.n_triangles, self.waves.n_waves):
            raise ShapeMismatch(
                f"face rhs shape {rhs.shape}, expected "
                f"({self.mesh.n_triangles}, {self.waves.n_waves})")
        solution = np.zeros((self.mesh.n_vertices, self.waves.n_waves),
                            dtype=np.complex128)
        reports = []
        for ell, (kappa, eta, _dirs, cols) in enumerate(self.waves.blocks()):
            b = self._Av.T @ rhs[:, cols]
            if self.method == "direct":
                x, block_reports = self._solve_dense(ell, b, transposed,
                                                     adjoint)
            else:
                apply = self._apply_gmres(kappa, eta, transposed, adjoint)
                x, block_reports = gmres_family(apply, b, tol,
                                                max_iter=max_iter)
            solution[:, cols] = x
            reports.extend(block_reports)
        bad = [r for r in reports if not r.converged]
        if bad:
            raise NoConvergence(
                f"{len(bad)} of {len(reports)} boundary solves hit the "
                f"iteration cap (worst residual "
                f"{max(r.relative_residual for r in bad):.3e})",
                result=solution, reports=reports)
        return solution, reports

    def normal_derivatives(self, tol: float = 1e-8,
                           max_iter: int = _GMRES_CAP):
        """Per-vertex du/dnu of the total field for each incident wave."""
        _areas, centers, normals = face_geometry(self.mesh)
        rhs = np.empty((self.mesh.n_triangles, self.waves.n_waves),
                       dtype=np.complex128)
        for col, (kappa, eta, d) in enumerate(self.waves.columns()):
            ui = _incident_at(centers, kappa, d)
            rhs[:, col] = (1j * kappa * (normals @ d) - 1j * eta) * ui
        psi, _reports = self.solve_faces(rhs, transposed=True, tol=tol,
                                         max_iter=max_iter)
        return psi

    def far_field(self, grid: EvalGrid, tol: float = 1e-8,
                  max_iter: int = _GMRES_CAP) -> FarField:
        """Scattered far field of every incident wave on ``grid``."""
        _areas, centers, normals = face_geometry(self.mesh)
        rhs = np.empty((self.mesh.n_triangles, self.waves.n_waves),
                       dtype=np.complex128)
        for col, (kappa, _eta, d) in enumerate(self.waves.columns()):
            rhs[:, col] = -_incident_at(centers, kappa, d)
        phi, reports = self.solve_faces(rhs, tol=tol, max_iter=max_iter)
        w = self._Av @ phi
        values = np.empty((grid.n_points, self.waves.n_waves),
                          dtype=np.complex128)
        for kappa, eta, _dirs, cols in self.waves.blocks():
            rows = _farfield_rows_indirect(grid, kappa, eta, centers,
                                           normals)
            values[:, cols] = rows @ w[:, cols]
        logger.info("far field: %d waves, %d faces, worst residual %.2e",
                    self.waves.n_waves, self.mesh.n_triangles,
                    max(r.relative_residual for r in reports))
        return FarField(values, grid, self.waves)


def solve_boundary_system(mesh: TriangleMesh, waves: WaveSet, face_rhs,
                          tol: float, transposed: bool = False,
                          adjoint: bool = False, max_iter: int = _GMRES_CAP,
                          tile: int = 32, method: str = "auto"):
    """One-shot boundary solve; see BoundaryOperator.solve_faces."""
    op = BoundaryOperator(mesh, waves, method=method, tile=tile)
    return op.solve_faces(face_rhs, transposed=transposed, adjoint=adjoint,
                          tol=tol, max_iter=max_iter)


def solve_indirect(mesh: TriangleMesh, waves: WaveSet, boundary_data,
                   tol: float, max_iter: int = _GMRES_CAP,
                   method: str = "auto"):
    """Combined-field solve with given per-vertex Dirichlet data.

    The data is interpolated to face midpoints (exact for piecewise-linear
    data); for plane-wave data prefer the far-field driver, which evaluates
    the incident wave at the midpoints directly.
    """
    data = np.asarray(boundary_data, dtype=np.complex128)
    if data.shape != (mesh.n_vertices, waves.n_waves):
        raise ShapeMismatch(
            f"boundary data shape {data.shape}, expected "
            f"({mesh.n_vertices}, {waves.n_waves})")
    face_rhs = data[mesh.triangles].mean(axis=1)
    density, _reports = solve_boundary_system(mesh, waves, face_rhs, tol,
                                              max_iter=max_iter,
                                              method=method)
    return density


def solve_direct(mesh: TriangleMesh, waves: WaveSet, tol: float,
                 max_iter: int = _GMRES_CAP, method: str = "auto"):
    """Normal derivative of the total field via the transposed equation.

    Right-hand side d(u_i)/d(nu) - i eta u_i evaluated at face midpoints.
    Returns per-vertex values of du/dnu, one column per wave.
    """
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    return BoundaryOperator(mesh, waves, method=method).normal_derivatives(
        tol=tol, max_iter=max_iter)


def _farfield_rows_indirect(grid, kappa, eta, centers, normals):
    """(n_points, n_faces) map from face coefficients Av phi to u_inf."""
    phases = np.exp(-1j * kappa * (grid.points @ centers.T))
    zdotnu = grid.points @ normals.T
    return (-1j * kappa * zdotnu - 1j * eta) * phases / (4.0 * np.pi)


def forward_far_field(mesh: TriangleMesh, waves: WaveSet, grid: EvalGrid,
                      tol: float, max_iter: int = _GMRES_CAP,
                      method: str = "auto") -> FarField:
    """Far fields of plane waves scattered by a sound-soft surface.

    Solves the combined-field equation with right-hand side -u_i at the
    face midpoints for each wave and evaluates the radiating representation
    by the same midpoint rule.  Columns follow the wave ordering of the
    WaveSet.
    """
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    return BoundaryOperator(mesh, waves, method=method).far_field(
        grid, tol=tol, max_iter=max_iter)


def far_field_from_normal_derivative(mesh: TriangleMesh, waves: WaveSet,
                                     grid: EvalGrid, psi) -> FarField:
    """Far field via the direct representation from per-vertex du/dnu."""
    psi = np.asarray(psi, dtype=np.complex128)
    if psi.shape != (mesh.n_vertices, waves.n_waves):
        raise ShapeMismatch("normal-derivative shape mismatch")
    centers = mesh.face_barycenters
    w = averaging_matrix(mesh) @ psi
    values = np.empty((grid.n_points, waves.n_waves), dtype=np.complex128)
    for kappa, _eta, _dirs, cols in waves.blocks():
        phases = np.exp(-1j * kappa * (grid.points @ centers.T))
        values[:, cols] = -(phases @ w[:, cols]) / (4.0 * np.pi)
    return FarField(values, grid, waves)


def farfield_inner(grid: EvalGrid, a, b) -> complex:
    """Weighted L2(S2) inner product sum_j w_j conj(a_j) b_j.

    Accepts single columns or (points, waves) stacks; multi-wave inputs are
    summed over waves, matching the product-space norm the residuals use.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.shape[0] != grid.n_points:
        raise ShapeMismatch("far-field columns must share the grid shape")
    w = grid.weights if a.ndim == 1 else grid.weights[:, None]
    return complex(np.sum(w * np.conj(a) * b))


# ---------------------------------------------------------------------------
# Far-field serialization
# ---------------------------------------------------------------------------

_FF_MAGIC = b"SCFF"
_FF_VERSION = 1


def save_far_field(ff: FarField, path):
    """Write a far field as a little-endian binary file."""
    path = Path(path)
    L, D, n = ff.waves.n_wavenumbers, ff.waves.n_directions, ff.grid.n_points
    delta = np.nan if ff.delta is None else float(ff.delta)
    with open(path, "wb") as fh:
        fh.write(_FF_MAGIC)
        fh.write(struct.pack("<IIIId", _FF_VERSION, L, D, n, delta))
        ff.grid.points.astype("<f8").tofile(fh)
        ff.grid.weights.astype("<f8").tofile(fh)
        ff.waves.kappas.astype("<f8").tofile(fh)
        ff.waves.directions.astype("<f8").tofile(fh)
        ff.waves.etas.astype("<f8").tofile(fh)
        ff.values.ravel(order="F").astype("<c16").tofile(fh)
    logger.info("wrote far field %s (%d points, %d waves)", path.name, n,
                L * D)


def load_far_field(path) -> FarField:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != _FF_MAGIC:
            raise ValueError(f"{path}: not a far-field file")
        version, L, D, n, delta = struct.unpack("<IIIId", fh.read(24))
        if version != _FF_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        points = np.fromfile(fh, dtype="<f8", count=3 * n).reshape(n, 3)
        weights = np.fromfile(fh, dtype="<f8", count=n)
        kappas = np.fromfile(fh, dtype="<f8", count=L)
        directions = np.fromfile(fh, dtype="<f8",
                                 count=3 * L * D).reshape(L, D, 3)
        etas = np.fromfile(fh, dtype="<f8", count=L)
        values = np.fromfile(fh, dtype="<c16", count=n * L * D)
        values = values.reshape((n, L * D), order="F")
    waves = WaveSet(kappas, directions, etas)
    grid = EvalGrid(points, weights)
    return FarField(values, grid, waves,
                    delta=None if np.isnan(delta) else float(delta))


def far_field_to_csv(ff: FarField, path):
    """Plain-text export: one row per grid point, Re/Im per wave."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("# far field export\n")
        fh.write("# kappas: " + " ".join(f"{k:.17g}" for k in
                                         ff.waves.kappas) + "\n")
        fh.write("# etas: " + " ".join(f"{e:.17g}" for e in ff.waves.etas)
                 + "\n")
        for ell in range(ff.waves.n_wavenumbers):
            dirs = " ".join("(%.17g %.17g %.17g)" % tuple(d)
                            for d in ff.waves.directions[ell])
            fh.write(f"# directions[{ell}]: {dirs}\n")
        if ff.delta is not None:
            fh.write(f"# delta: {ff.delta:.17g}\n")
        cols = ["x", "y", "z", "weight"]
        for j in range(ff.waves.n_waves):
            cols += [f"re_{j}", f"im_{j}"]
        fh.write(",".join(cols) + "\n")
        for i in range(ff.grid.n_points):
            row = [f"{ff.grid.points[i, 0]:.17g}",
                   f"{ff.grid.points[i, 1]:.17g}",
                   f"{ff.grid.points[i, 2]:.17g}",
                   f"{ff.grid.weights[i]:.17g}"]
            for j in range(ff.waves.n_waves):
                row += [f"{ff.values[i, j].real:.17g}",
                        f"{ff.values[i, j].imag:.17g}"]
            fh.write(",".join(row) + "\n")
