"""Triangle mesh type, file I/O, icospheres, and the cotan Laplacian.

A mesh is a closed, consistently oriented triangle surface: every undirected
edge is shared by exactly two triangles and appears once in each direction.
Vertex positions and triangle indices are numpy arrays and are frozen after
construction (the arrays are marked read-only), so meshes can be shared
freely between threads; every operation that "changes" a mesh returns a new
one.

Field conventions used across the package:

* a *vertex field* is an ``(n_vertices, 3)`` float array (displacements,
  search directions, gradients),
* a *face scalar field* is ``(n_triangles,)``,
* a *face vector field* is ``(n_triangles, 3)``.
"""

from __future__ import annotations

import logging
import struct
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

__all__ = [
    "MeshError", "ParseError", "NotClosed", "NotOriented", "DegenerateFace",
    "LevelTooLarge", "TriangleMesh", "icosphere", "load_mesh", "save_mesh",
    "face_geometry", "cotan_laplacian", "lumped_mass",
]


class MeshError(Exception):
    """Base class for mesh construction and validation failures."""


class ParseError(MeshError):
    """Malformed mesh file."""


class NotClosed(MeshError):
    """The surface has boundary edges."""


class NotOriented(MeshError):
    """Triangle windings are not globally consistent."""


class DegenerateFace(MeshError):
    """A triangle with (near-)zero area."""


class LevelTooLarge(MeshError):
    """Icosphere subdivision level beyond the desk-scale cap."""


# Area threshold for degeneracy, relative to the mean face area.
_DEGENERATE_REL_AREA = 1e-14


class TriangleMesh:
    """Closed oriented triangle surface with derived per-face geometry.

    Parameters
    ----------
    vertices : (n, 3) float array of positions.
    triangles : (m, 3) integer array of vertex indices, counter-clockwise
        when seen from outside.

    Derived per-face quantities (areas, barycenters, outward unit normals)
    are computed lazily and cached.  Use :meth:`validate` to check the
    closed/oriented/non-degenerate invariants; constructors that ingest
    untrusted data (file loaders, remeshing) call it for you.
    """

    def __init__(self, vertices, triangles):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        t = np.ascontiguousarray(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (m, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        v.flags.writeable = False
        t.flags.writeable = False
        self.vertices = v
        self.triangles = t

    # -- basic counts ------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    # -- derived geometry --------------------------------------------------

    @cached_property
    def corner_vertices(self):
        """The three (m, 3) position arrays of triangle corners."""
        t = self.triangles
        return (self.vertices[t[:, 0]], self.vertices[t[:, 1]],
                self.vertices[t[:, 2]])

    @cached_property
    def face_normals_unnormalized(self):
        x0, x1, x2 = self.corner_vertices
        return np.cross(x1 - x0, x2 - x0)

    @cached_property
    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals_unnormalized, axis=1)

    @cached_property
    def face_normals(self):
        n = self.face_normals_unnormalized
        norms = np.linalg.norm(n, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateFace("zero-area face has no normal")
        return n / norms[:, None]

    @cached_property
    def face_barycenters(self):
        x0, x1, x2 = self.corner_vertices
        return (x0 + x1 + x2) / 3.0

    @cached_property
    def halfedges(self):
        """All 3m directed edges, in triangle order (01, 12, 20)."""
        t = self.triangles
        return np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]],
                        axis=1).reshape(-1, 2)

    @cached_property
    def edges(self):
        """Unique undirected edges as sorted (i, j) pairs, lexically ordered."""
        he = np.sort(self.halfedges, axis=1)
        return np.unique(he, axis=0)

    @cached_property
    def edge_lengths(self):
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]],
                              axis=1)

    @cached_property
    def mean_edge_length(self) -> float:
        return float(self.edge_lengths.mean())

    @cached_property
    def diameter(self) -> float:
        """Exact max pairwise vertex distance (blocked evaluation)."""
        v = self.vertices
        best = 0.0
        step = 512
        for i in range(0, len(v), step):
            d = np.linalg.norm(v[i:i + step, None, :] - v[None, :, :], axis=2)
            best = max(best, float(d.max()))
        return best

    @cached_property
    def signed_volume(self) -> float:
        """Enclosed volume; positive iff normals point outward."""
        x0, x1, x2 = self.corner_vertices
        return float(np.einsum("ij,ij->i", x0, np.cross(x1, x2)).sum() / 6.0)

    @cached_property
    def vertex_adjacency(self):
        """CSR boolean vertex-vertex adjacency (symmetric)."""
        e = self.edges
        n = self.n_vertices
        data = np.ones(2 * len(e), dtype=bool)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    # -- invariants --------------------------------------------------------

    def validate(self):
        """Check the closed/oriented/non-degenerate invariants.

        Raises :class:`NotClosed`, :class:`NotOriented` or
        :class:`DegenerateFace`; returns ``self`` so it chains.
        """
        t = self.triangles
        if len(t) == 0:
            raise MeshError("empty mesh")
        if np.any(t[:, 0] == t[:, 1]) or np.any(t[:, 1] == t[:, 2]) \
                or np.any(t[:, 2] == t[:, 0]):
            raise DegenerateFace("triangle with a repeated vertex")
        he = self.halfedges
        n = self.n_vertices
        code = he[:, 0].astype(np.int64) * n + he[:, 1]
        code_sorted = np.sort(code)
        if np.any(code_sorted[1:] == code_sorted[:-1]):
            raise NotOriented("a directed edge appears in two triangles")
        opposite = he[:, 1].astype(np.int64) * n + he[:, 0]
        missing = np.setdiff1d(code, opposite, assume_unique=False)
        if missing.size:
            raise NotClosed(f"{missing.size} boundary half-edges")
        areas = self.face_areas
        if np.any(areas < _DEGENERATE_REL_AREA * areas.mean()):
            raise DegenerateFace("face area below 1e-14 of the mean")
        return self

    def is_outward_oriented(self) -> bool:
        return self.signed_volume > 0.0

    # -- simple constructive helpers ----------------------------------------

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same connectivity, new positions."""
        return TriangleMesh(vertices, self.triangles)

    def translated(self, offset) -> "TriangleMesh":
        return self.with_vertices(self.vertices + np.asarray(offset, float))

    def scaled(self, factor) -> "TriangleMesh":
        return self.with_vertices(self.vertices * float(factor))

    def __repr__(self):
        return (f"TriangleMesh({self.n_vertices} vertices, "
                f"{self.n_triangles} triangles)")


def face_geometry(mesh: TriangleMesh):
    """Per-face (areas, barycenters, outward unit normals).

    Thin accessor over the cached mesh properties; raises
    :class:`DegenerateFace` if any face has zero area.
    """
    return mesh.face_areas, mesh.face_barycenters, mesh.face_normals


# ---------------------------------------------------------------------------
# Icosphere
# ---------------------------------------------------------------------------

_ICOSPHERE_MAX_LEVEL = 7


def icosphere(level: int, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron projected onto the sphere of given radius.

    Vertex count is 10*4^level + 2; all vertices lie exactly on the sphere.
    ``level`` is capped at 7 (163842 vertices) — plenty beyond desk scale.
    """
    if level < 0:
        raise ValueError("level must be nonnegative")
    if level > _ICOSPHERE_MAX_LEVEL:
        raise LevelTooLarge(f"icosphere level {level} > {_ICOSPHERE_MAX_LEVEL}")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(level):
        verts_list = list(verts)
        midpoint = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            idx = midpoint.get(key)
            if idx is None:
                p = verts_list[i] + verts_list[j]
                p = p / np.linalg.norm(p)
                idx = len(verts_list)
                verts_list.append(p)
                midpoint[key] = idx
            return idx

        new_faces = np.empty((4 * len(faces), 3), dtype=np.int64)
        for k, (a, b, c) in enumerate(faces):
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces[4 * k:4 * k + 4] = [
                [a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = new_faces

    return TriangleMesh(radius * verts, faces).validate()


# ---------------------------------------------------------------------------
# File I/O: ASCII OBJ (primary) and binary little-endian PLY (secondary)
# ---------------------------------------------------------------------------

def load_mesh(path) -> TriangleMesh:
    """Load an OBJ or PLY triangle mesh and validate it.

    The surface must be closed and consistently oriented with strictly
    positive triangle areas; a consistently inward-facing file is accepted
    and silently reoriented outward.

    Raises
    ------
    ParseError, NotClosed, NotOriented, DegenerateFace
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, faces = _read_obj(path)
    elif suffix == ".ply":
        verts, faces = _read_ply(path)
    else:
        raise ParseError(f"unsupported mesh format {suffix!r}")
    mesh = TriangleMesh(verts, faces).validate()
    if not mesh.is_outward_oriented():
        logger.info("reorienting inward-facing mesh %s", path.name)
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[:, [0, 2, 1]])
    logger.info("loaded %s: %d vertices, %d triangles", path.name,
                mesh.n_vertices, mesh.n_triangles)
    return mesh


def _read_obj(path):
    verts, faces = [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError(f"{path}:{lineno}: bad vertex line")
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: {exc}") from None
            elif tag == "f":
                if len(parts) != 4:
                    raise ParseError(
                        f"{path}:{lineno}: only triangular faces supported")
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ParseError(
                            f"{path}:{lineno}: bad face index {token!r}"
                        ) from None
                    # OBJ is 1-based; negative indices count from the end.
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                faces.append(idx)
            # all other tags (vn, vt, o, g, s, usemtl, ...) are ignored
    if not verts or not faces:
        raise ParseError(f"{path}: no vertices or faces found")
    return np.array(verts, float), np.array(faces, np.int64)


_PLY_DTYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ParseError(f"{path}: not a PLY file")
        fmt = None
        elements = []    # list of (name, count, [(prop_name, dtype or list)])
        while True:
            line = fh.readline()
            if not line:
                raise ParseError(f"{path}: unterminated PLY header")
            tokens = line.decode("ascii", "replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if not elements:
                    raise ParseError(f"{path}: property before element")
                if tokens[1] == "list":
                    elements[-1][2].append(
                        (tokens[4], ("list", _PLY_DTYPES[tokens[2]],
                                     _PLY_DTYPES[tokens[3]])))
                else:
                    elements[-1][2].append((tokens[2], _PLY_DTYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("binary_little_endian", "ascii"):
            raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
        verts = faces = None
        for name, count, props in elements:
            if fmt == "ascii":
                rows = [fh.readline().split() for _ in range(count)]
                if name == "vertex":
                    cols = {p: i for i, (p, _d) in enumerate(props)}
                    try:
                        verts = np.array(
                            [[float(r[cols[c]]) for c in ("x", "y", "z")]
                             for r in rows])
                    except (KeyError, IndexError, ValueError):
                        raise ParseError(f"{path}: bad vertex element") from None
                elif name == "face":
                    faces = _ply_face_rows([r for r in rows])
                continue
            # binary little-endian
            if name == "vertex" and all(not isinstance(d, tuple)
                                        for _p, d in props):
                dtype = np.dtype([(p, "<" + d) for p, d in props])
                data = np.frombuffer(fh.read(dtype.itemsize * count),
                                     dtype=dtype, count=count)
                try:
                    verts = np.stack([data["x"], data["y"], data["z"]],
                                     axis=1).astype(float)
                except KeyError:
                    raise ParseError(f"{path}: vertex element lacks x/y/z") \
                        from None
            elif name == "face":
                rows = []
                for _ in range(count):
                    row = None
                    for _pname, pdt in props:
                        if isinstance(pdt, tuple):
                            _tag, cdt, idt = pdt
                            n = int(np.frombuffer(
                                fh.read(np.dtype(cdt).itemsize),
                                dtype="<" + cdt)[0])
                            row = list(np.frombuffer(
                                fh.read(np.dtype(idt).itemsize * n),
                                dtype="<" + idt))
                        else:
                            fh.read(np.dtype(pdt).itemsize)  # skip scalar
                    if row is None:
                        raise ParseError(f"{path}: face element has no list")
                    rows.append(row)
                faces = _ply_face_rows(rows)
            else:
                # skip unknown fixed-size element
                try:
                    size = sum(np.dtype(d).itemsize for _p, d in props)
                except TypeError:
                    raise ParseError(
                        f"{path}: cannot skip list element {name!r}") from None
                fh.read(size * count)
        if verts is None or faces is None:
            raise ParseError(f"{path}: missing vertex or face element")
        return verts, faces


def _ply_face_rows(rows):
    out = []
    for r in rows:
        if len(r) == 4:       # ascii row: count + 3 indices
            r = r[1:] if int(r[0]) == 3 else None
        if r is None or len(r) != 3:
            raise ParseError("only triangular PLY faces supported")
        out.append([int(x) for x in r])
    return np.array(out, np.int64)


def save_mesh(mesh: TriangleMesh, path, vertex_scalars=None,
              face_scalars=None):
    """Write a mesh as ASCII OBJ or binary little-endian PLY.

    Optional per-vertex / per-face scalar fields are stored as PLY
    ``quality`` properties (ignored for OBJ, which has no slot for them).
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for t in mesh.triangles:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    elif suffix == ".ply":
        _write_ply(mesh, path, vertex_scalars, face_scalars)
    else:
        raise ParseError(f"unsupported mesh format {suffix!r}")


def _write_ply(mesh, path, vertex_scalars, face_scalars):
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    if vertex_scalars is not None:
        header.append("property double quality")
    header.append(f"element face {mesh.n_triangles}")
    header.append("property list uchar int32 vertex_indices")
    if face_scalars is not None:
        header.append("property double quality")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if vertex_scalars is None:
            mesh.vertices.astype("<f8").tofile(fh)
        else:
            block = np.column_stack([mesh.vertices,
                                     np.asarray(vertex_scalars, float)])
            block.astype("<f8").tofile(fh)
        for k, t in enumerate(mesh.triangles):
            fh.write(struct.pack("<B3i", 3, *t))
            if face_scalars is not None:
                fh.write(struct.pack("<d", float(face_scalars[k])))


# ---------------------------------------------------------------------------
# Cotan Laplacian and lumped mass
# ---------------------------------------------------------------------------

def cotan_laplacian(mesh: TriangleMesh, clamp: bool = False):
    """Cotangent-weight stiffness matrix (CSR, symmetric, zero row sums).

    The quadratic form is <Lu, u> = sum_edges w_ij (u_i - u_j)^2 with
    w_ij = (cot a_ij + cot b_ij)/2 over the two angles opposite the edge.
    With ``clamp=True`` negative edge weights (obtuse pairs) are clamped to
    zero, which keeps the matrix positive semidefinite on any mesh; the
    unclamped matrix is the honest discretization and is what everything
    outside the preconditioner uses.
    """
    t = mesh.triangles
    x0, x1, x2 = mesh.corner_vertices
    n = mesh.n_vertices

    rows, cols, vals = [], [], []
    # Corner k of each face is opposite edge (k+1, k+2).
    corners = ((x0, t[:, 1], t[:, 2], x1, x2),
               (x1, t[:, 2], t[:, 0], x2, x0),
               (x2, t[:, 0], t[:, 1], x0, x1))
    for apex, i, j, xi, xj in corners:
        u = xi - apex
        v = xj - apex
        cos = np.einsum("ij,ij->i", u, v)
        sin = np.linalg.norm(np.cross(u, v), axis=1)
        w = 0.5 * cos / np.maximum(sin, 1e-300)
        rows.append(i)
        cols.append(j)
        vals.append(w)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    off = off + off.T                      # symmetrize: both opposite angles
    if clamp:
        off.data = np.maximum(off.data, 0.0)
    diag = np.asarray(off.sum(axis=1)).ravel()
    return (sparse.diags(diag) - off).tocsr()


def lumped_mass(mesh: TriangleMesh):
    """Diagonal (lumped) mass matrix: a third of incident face areas."""
    t = mesh.triangles
    areas = mesh.face_areas
    m = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(m, t[:, k], areas / 3.0)
    return sparse.diags(m).tocsr()
