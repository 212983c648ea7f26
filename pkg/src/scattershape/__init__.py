"""Shape reconstruction of sound-soft scatterers from far-field data.

The package is organized as a small stack of libraries plus a CLI:

* :mod:`scattershape.mesh` — triangle meshes, I/O, icospheres, cotan Laplacian
* :mod:`scattershape.remesh` — edge split/collapse/flip remeshing
* :mod:`scattershape.collision` — BVH, continuous collision detection,
  Hausdorff and signed distances
* :mod:`scattershape.krylov` — GMRES with right preconditioning
* :mod:`scattershape.bem` — Helmholtz boundary-element forward solver and
  far fields
* :mod:`scattershape.tangent_point` — tangent-point energy, metric,
  preconditioner
* :mod:`scattershape.gauss_newton` — shape derivative, adjoint, regularized
  Gauss-Newton driver
* :mod:`scattershape.cli` — the ``scatter`` command
"""

from scattershape.mesh import TriangleMesh, icosphere, load_mesh, save_mesh

__all__ = ["TriangleMesh", "icosphere", "load_mesh", "save_mesh",
           "WaveSet", "EvalGrid", "FarField", "forward_far_field",
           "EnergyParams", "tp_energy", "tp_differential",
           "GNConfig", "GNState", "irgnm_run", "make_noisy_data"]

__version__ = "0.1.0"


def __getattr__(name):
    # heavy modules (numba JIT on import path) load lazily so that
    # `import scattershape` stays cheap for mesh-only consumers
    if name in ("WaveSet", "EvalGrid", "FarField", "forward_far_field"):
        from scattershape import bem
        return getattr(bem, name)
    if name in ("EnergyParams", "tp_energy", "tp_differential"):
        from scattershape import tangent_point
        return getattr(tangent_point, name)
    if name in ("GNConfig", "GNState", "irgnm_run", "make_noisy_data"):
        from scattershape import gauss_newton
        return getattr(gauss_newton, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
