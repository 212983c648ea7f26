"""Right-preconditioned GMRES over single vectors or RHS families.

Full-memory (unrestarted) GMRES with modified Gram-Schmidt plus one
conditional reorthogonalization pass, for real or complex systems given as
a callable.  Right preconditioning means the reported and tested residuals
are true residuals of the original system, which downstream discrepancy
logic reads.

``gmres_family`` runs one Arnoldi process per right-hand side in lockstep,
batching the operator applications; callers whose products amortize over
columns (blocked kernel assembly) pass a family apply that maps an
(n, d) block to an (n, d) block column by column.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

__all__ = ["SolveReport", "Breakdown", "gmres", "gmres_family"]

_REORTH_THRESHOLD = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one GMRES solve."""

    iterations: int
    relative_residual: float
    converged: bool


class Breakdown(Exception):
    """Arnoldi collapse before reaching the tolerance.

    Only a singular (preconditioned) operator triggers this: exhausting the
    Krylov space of a nonsingular operator solves the system exactly.  The
    best iterate and its report ride along as ``solution`` and ``report``.
    """

    def __init__(self, message, solution=None, report=None):
        super().__init__(message)
        self.solution = solution
        self.report = report


def gmres(apply, rhs, tol, max_iter=500, precond=None):
    """Solve apply(x) = rhs to a relative true-residual tolerance.

    Parameters
    ----------
    apply : callable mapping a vector to a vector (linear).
    rhs : (n,) real or complex array.
    tol : target for ||rhs - apply(x)|| / ||rhs||, > 0.
    max_iter : Krylov dimension cap (full memory, no restarts).
    precond : optional callable M; applied on the right (solve A M z = rhs,
        return x = M z), so residuals are residuals of the original system.

    Returns
    -------
    (x, SolveReport)
    """
    x, reports = gmres_family(
        lambda block: np.asarray(apply(block[:, 0]))[:, None],
        np.asarray(rhs)[:, None], tol, max_iter,
        None if precond is None else
        (lambda block: np.asarray(precond(block[:, 0]))[:, None]))
    return x[:, 0], reports[0]


def gmres_family(apply, rhs, tol, max_iter=500, precond=None):
    """Solve apply(X) = B column by column with lockstep Arnoldi processes.

    ``apply``/``precond`` map (n, d) blocks to (n, d) blocks acting on each
    column independently; one block application per iteration serves every
    still-active column.  Columns that converge early stop growing but their
    finished slots keep riding along.

    Returns (solution (n, d), list of d SolveReports).
    """
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    rhs = np.asarray(rhs)
    if rhs.ndim != 2:
        raise ValueError("rhs must be (n, d)")
    n, d = rhs.shape
    dtype = np.promote_types(rhs.dtype, np.float64)
    max_iter = int(min(max_iter, n))

    norms = np.linalg.norm(rhs, axis=0)
    solution = np.zeros((n, d), dtype=dtype)
    reports: list = [None] * d
    active = [j for j in range(d) if norms[j] > 0.0]
    for j in range(d):
        if norms[j] == 0.0:
            reports[j] = SolveReport(0, 0.0, True)
    if not active:
        return solution, reports

    basis = {j: [rhs[:, j].astype(dtype) / norms[j]] for j in active}
    hess = {j: np.zeros((max_iter + 1, max_iter), dtype=dtype)
            for j in active}
    rotations = {j: [] for j in active}
    # incrementally rotated least-squares right-hand side
    g = {j: np.zeros(max_iter + 1, dtype=dtype) for j in active}
    for j in active:
        g[j][0] = norms[j]
    depth = {j: 0 for j in active}
    rel = {j: 1.0 for j in active}

    def finalize(j, converged, broken=False):
        k = depth[j]
        if k > 0:
            R = hess[j][:k, :k]
            if broken:
                y, *_ = np.linalg.lstsq(R, g[j][:k], rcond=None)
            else:
                y = np.linalg.solve(R, g[j][:k])
            solution[:, j] = np.stack(basis[j][:k], axis=1) @ y
        reports[j] = SolveReport(k, float(rel[j]), bool(converged))
        if broken:
            raise Breakdown(
                f"Arnoldi breakdown in column {j} at iteration {k} "
                f"(relative residual {rel[j]:.3e})",
                solution=(solution[:, j] if precond is None
                          else None), report=reports[j])

    it = 0
    while active and it < max_iter:
        block = np.stack([basis[j][depth[j]] for j in active], axis=1)
        if precond is not None:
            block = np.asarray(precond(block))
        w = np.asarray(apply(block))
        still = []
        for col, j in enumerate(active):
            k = depth[j]
            wj = w[:, col].astype(dtype, copy=True)
            norm_before = np.linalg.norm(wj)
            h = hess[j]
            for i in range(k + 1):
                c = np.vdot(basis[j][i], wj)
                h[i, k] += c
                wj -= c * basis[j][i]
            if np.linalg.norm(wj) < _REORTH_THRESHOLD * norm_before:
                for i in range(k + 1):
                    c = np.vdot(basis[j][i], wj)
                    h[i, k] += c
                    wj -= c * basis[j][i]
            h_next = np.linalg.norm(wj)
            h[k + 1, k] = h_next

            col_h = h[:k + 2, k]
            for i, (cs, sn) in enumerate(rotations[j]):
                t = cs * col_h[i] + sn * col_h[i + 1]
                col_h[i + 1] = -np.conj(sn) * col_h[i] + cs * col_h[i + 1]
                col_h[i] = t
            if col_h[k] == 0.0 and col_h[k + 1] == 0.0:
                # operator annihilated the basis vector: the least-squares
                # residual is unchanged, and R picks up a zero diagonal
                rotations[j].append((1.0, 0.0))
                g[j][k + 1] = g[j][k]
                g[j][k] = 0.0
            else:
                cs, sn = _make_rotation(col_h[k], col_h[k + 1])
                rotations[j].append((cs, sn))
                col_h[k] = cs * col_h[k] + sn * col_h[k + 1]
                col_h[k + 1] = 0.0
                g[j][k + 1] = -np.conj(sn) * g[j][k]
                g[j][k] = cs * g[j][k]
            rel[j] = abs(g[j][k + 1]) / norms[j]
            depth[j] = k + 1

            if rel[j] <= tol:
                finalize(j, True)
            elif h_next == 0.0:
                finalize(j, False, broken=True)
            else:
                basis[j].append(wj / h_next)
                still.append(j)
        active = still
        it += 1

    for j in active:
        finalize(j, False)
        logger.debug("gmres column %d stalled at %.3e after %d iterations",
                     j, rel[j], depth[j])

    if precond is not None:
        solution = np.asarray(precond(solution))
    return solution, reports


def _make_rotation(a, b):
    """Givens rotation zeroing b against a, complex-safe."""
    if b == 0.0:
        return 1.0, 0.0
    if a == 0.0:
        return 0.0, 1.0
    r = np.sqrt(abs(a) ** 2 + abs(b) ** 2)
    return abs(a) / r, (a / abs(a)) * np.conj(b) / r
