"""Isotropic incremental remeshing: split, collapse, flip, smooth.

One call runs the classic cycle — split edges longer than 4/3 of the target,
collapse edges shorter than 4/5 of the target, flip to intrinsic Delaunay,
then a few rounds of damped tangential Laplacian smoothing.  Collapses and
flips that would break the closed-manifold invariants (link condition,
duplicate edges, degenerate or inverted triangles) are skipped and counted;
the operation only fails if it cannot produce a valid mesh at all.

Everything is processed in deterministically sorted order, so a remesh of
the same mesh is bit-identical across runs.
"""

from __future__ import annotations

import logging

import numpy as np

from scattershape.mesh import MeshError, TriangleMesh

logger = logging.getLogger(__name__)

__all__ = ["RemeshFailed", "remesh"]

_SPLIT_FACTOR = 4.0 / 3.0
_COLLAPSE_FACTOR = 4.0 / 5.0
_SMOOTH_DAMPING = 0.5
_MAX_PASSES = 20


class RemeshFailed(MeshError):
    """Remeshing could not produce a valid closed oriented mesh."""


def remesh(mesh: TriangleMesh, target_edge: float,
           smoothing_rounds: int = 3) -> TriangleMesh:
    """Drive edge lengths toward a target and improve triangle quality.

    Parameters
    ----------
    mesh : valid closed oriented mesh.
    target_edge : desired edge length, > 0.  Edges above 4/3 of it are
        split at their midpoint, edges below 4/5 collapsed to theirs.
    smoothing_rounds : rounds of damped uniform Laplacian smoothing with
        the displacement projected onto the tangent plane (0 leaves vertex
        positions untouched by the smoothing stage).

    Returns
    -------
    TriangleMesh satisfying all invariants.

    Raises
    ------
    RemeshFailed if no valid mesh can be produced.
    """
    if not target_edge > 0.0:
        raise ValueError("target_edge must be positive")
    verts = [v for v in np.asarray(mesh.vertices, dtype=np.float64)]
    faces = [list(f) for f in mesh.triangles]

    _split_long_edges(verts, faces, _SPLIT_FACTOR * target_edge)
    verts, faces = _collapse_short_edges(verts, faces,
                                         _COLLAPSE_FACTOR * target_edge,
                                         _SPLIT_FACTOR * target_edge)
    _delaunay_flips(verts, faces)
    vert_array = np.array(verts)
    face_array = np.array(faces, dtype=np.int64)
    vert_array = _tangential_smooth(vert_array, face_array, smoothing_rounds)

    try:
        out = TriangleMesh(vert_array, face_array).validate()
    except MeshError as exc:
        raise RemeshFailed(f"result violates mesh invariants: {exc}") from exc
    logger.info("remesh: %d -> %d triangles (target edge %.4g)",
                mesh.n_triangles, out.n_triangles, target_edge)
    return out


# ---------------------------------------------------------------------------
# passes
# ---------------------------------------------------------------------------

def _edge_faces(faces):
    """Map from sorted edge (i, j) to the list of incident face indices."""
    emap = {}
    for fi, f in enumerate(faces):
        for k in range(3):
            a, b = f[k], f[(k + 1) % 3]
            key = (a, b) if a < b else (b, a)
            emap.setdefault(key, []).append(fi)
    return emap


def _edge_length(verts, edge):
    return float(np.linalg.norm(verts[edge[0]] - verts[edge[1]]))


def _split_long_edges(verts, faces, limit):
    """Split every edge longer than ``limit`` at its midpoint, in place."""
    for _ in range(_MAX_PASSES):
        emap = _edge_faces(faces)
        long_edges = [(e, _edge_length(verts, e)) for e in emap]
        long_edges = [(l, e) for e, l in long_edges if l > limit]
        if not long_edges:
            return
        long_edges.sort(key=lambda t: (-t[0], t[1]))
        dirty = set()
        n_split = 0
        for _l, (a, b) in long_edges:
            incident = emap[(a, b)]
            if len(incident) != 2 or any(fi in dirty for fi in incident):
                continue
            m = len(verts)
            verts.append(0.5 * (verts[a] + verts[b]))
            for fi in incident:
                f = faces[fi]
                # replace face (a, b, c) by (a, m, c) and append (m, b, c),
                # in whichever cyclic orientation the edge occurs
                k = next(k for k in range(3)
                         if {f[k], f[(k + 1) % 3]} == {a, b})
                p, q, r = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
                faces[fi] = [p, m, r]
                faces.append([m, q, r])
                dirty.add(fi)
                dirty.add(len(faces) - 1)
            n_split += 1
        if n_split == 0:
            return
        logger.debug("split pass: %d edges", n_split)


def _vertex_neighbors(faces, n_verts):
    nbrs = [set() for _ in range(n_verts)]
    for f in faces:
        for k in range(3):
            nbrs[f[k]].add(f[(k + 1) % 3])
            nbrs[f[k]].add(f[(k + 2) % 3])
    return nbrs


def _collapse_short_edges(verts, faces, limit, upper):
    """Collapse edges shorter than ``limit`` to their midpoint.

    Skips any collapse that would violate the link condition, produce an
    edge longer than ``upper``, invert a triangle, or shrink the mesh below
    a tetrahedron.  Returns compacted (verts, faces).
    """
    n_skipped = 0
    for _ in range(_MAX_PASSES):
        emap = _edge_faces(faces)
        nbrs = _vertex_neighbors(faces, len(verts))
        short = [(_edge_length(verts, e), e) for e in emap]
        short = [(l, e) for l, e in short if l < limit]
        if not short:
            break
        short.sort(key=lambda t: (t[0], t[1]))
        vert_faces = {}
        for fi, f in enumerate(faces):
            for v in f:
                vert_faces.setdefault(v, set()).add(fi)
        dirty = set()
        n_collapsed = 0
        for _l, (a, b) in short:
            if a in dirty or b in dirty:
                continue
            if len(faces) - 2 * len(dirty) <= 6:
                break                    # keep at least a tetrahedron's worth
            incident = emap[(a, b)]
            if len(incident) != 2:
                continue
            opposite = {v for fi in incident for v in faces[fi]} - {a, b}
            # link condition: shared neighbors are exactly the two
            # opposite vertices, else the collapse pinches the surface
            if nbrs[a] & nbrs[b] != opposite:
                n_skipped += 1
                continue
            mid = 0.5 * (verts[a] + verts[b])
            if any(np.linalg.norm(mid - verts[v]) > upper
                   for v in (nbrs[a] | nbrs[b]) - {a, b}):
                n_skipped += 1
                continue
            # normal-flip / degeneracy guard on all surviving faces
            ring = (vert_faces.get(a, set()) | vert_faces.get(b, set())) \
                - set(incident)
            ok = True
            for fi in ring:
                f = faces[fi]
                old = [verts[v] for v in f]
                new = [mid if v in (a, b) else verts[v] for v in f]
                n_old = np.cross(old[1] - old[0], old[2] - old[0])
                n_new = np.cross(new[1] - new[0], new[2] - new[0])
                if (np.linalg.norm(n_new) < 1e-12 * np.linalg.norm(n_old)
                        or n_old @ n_new <= 0.0):
                    ok = False
                    break
            if not ok:
                n_skipped += 1
                continue
            # perform: b merges into a, a moves to the midpoint
            verts[a] = mid
            for fi in sorted(vert_faces.get(b, set())):
                f = faces[fi]
                faces[fi] = [a if v == b else v for v in f]
                vert_faces.setdefault(a, set()).add(fi)
            dead = sorted(incident, reverse=True)
            for fi in dead:
                faces[fi] = None
            dirty.update(nbrs[a] | nbrs[b] | {a, b})
            n_collapsed += 1
        faces[:] = [f for f in faces if f is not None]
        if n_collapsed == 0:
            break
        logger.debug("collapse pass: %d edges", n_collapsed)
    if n_skipped:
        logger.info("collapse: skipped %d edges (manifold/quality guards)",
                    n_skipped)
    # compact unused vertices
    used = sorted({v for f in faces for v in f})
    remap = {v: i for i, v in enumerate(used)}
    new_verts = [verts[v] for v in used]
    new_faces = [[remap[v] for v in f] for f in faces]
    return new_verts, new_faces


def _delaunay_flips(verts, faces):
    """Flip edges until the intrinsic Delaunay criterion holds everywhere."""
    total = 0
    for _ in range(_MAX_PASSES):
        emap = _edge_faces(faces)
        all_edges = {(a, b) for f in faces for a, b in
                     ((f[0], f[1]), (f[1], f[2]), (f[2], f[0]))}
        n_flipped = 0
        dirty = set()
        for key in sorted(emap):
            incident = emap[key]
            if len(incident) != 2 or any(fi in dirty for fi in incident):
                continue
            f1, f2 = (faces[fi] for fi in incident)
            a, b = key
            c = next(v for v in f1 if v not in key)
            d = next(v for v in f2 if v not in key)
            if c == d:
                continue
            # opposite angles: flip when cot(angle at c) + cot(angle at d) < 0
            def cot_at(apex, i, j):
                u = verts[i] - verts[apex]
                v = verts[j] - verts[apex]
                sin = np.linalg.norm(np.cross(u, v))
                return (u @ v) / max(sin, 1e-300)

            if cot_at(c, a, b) + cot_at(d, a, b) >= -1e-12:
                continue
            if (min(c, d), max(c, d)) in all_edges:
                continue                 # flip would duplicate an edge
            # rebuild the two faces across the other diagonal, keeping
            # orientation: boundary cycle is a->d, d->b, b->c, c->a
            if (a, b) not in ((f1[0], f1[1]), (f1[1], f1[2]),
                              (f1[2], f1[0])):
                f1, f2 = f2, f1
                c, d = d, c
                incident = incident[::-1]
            new1 = [a, d, c]
            new2 = [d, b, c]
            n_shared = np.cross(verts[d] - verts[c], verts[a] - verts[c])
            m_shared = np.cross(verts[b] - verts[c], verts[d] - verts[c])
            if (np.linalg.norm(n_shared) < 1e-14
                    or np.linalg.norm(m_shared) < 1e-14):
                continue
            faces[incident[0]] = new1
            faces[incident[1]] = new2
            all_edges.discard((a, b))
            all_edges.discard((b, a))
            all_edges.add((min(c, d), max(c, d)))
            dirty.update(incident)
            n_flipped += 1
        total += n_flipped
        if n_flipped == 0:
            break
    if total:
        logger.debug("delaunay: %d flips", total)


def _tangential_smooth(verts, faces, rounds):
    """Damped uniform Laplacian smoothing restricted to the tangent plane."""
    if rounds <= 0:
        return verts
    verts = verts.copy()
    n = len(verts)
    for _ in range(rounds):
        x0 = verts[faces[:, 0]]
        x1 = verts[faces[:, 1]]
        x2 = verts[faces[:, 2]]
        fn = np.cross(x1 - x0, x2 - x0)      # area-weighted face normals
        vnorm = np.zeros((n, 3))
        centroid = np.zeros((n, 3))
        degree = np.zeros(n)
        for k in range(3):
            np.add.at(vnorm, faces[:, k], fn)
            np.add.at(centroid, faces[:, k],
                      verts[faces[:, (k + 1) % 3]]
                      + verts[faces[:, (k + 2) % 3]])
            np.add.at(degree, faces[:, k], 2.0)
        centroid /= degree[:, None]
        lengths = np.linalg.norm(vnorm, axis=1)
        vnorm /= np.maximum(lengths, 1e-300)[:, None]
        disp = centroid - verts
        disp -= np.einsum("ij,ij->i", disp, vnorm)[:, None] * vnorm
        verts += _SMOOTH_DAMPING * disp
    return verts
