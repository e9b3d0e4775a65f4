"""Indexed triangle meshes with ring neighborhoods and 1-to-4 subdivision."""
from __future__ import annotations

import logging
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

__all__ = [
    "RING_LEVELS",
    "MeshError",
    "MeshFormatError",
    "MeshTopologyError",
    "Mesh",
    "load_mesh",
    "save_mesh",
    "vertex_normals_averaged",
    "ring_neighborhood",
    "select_fit_points",
    "subdivide_1to4",
    "n_coeffs",
]

RING_LEVELS = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5)


class MeshError(ValueError):
    """Base class for invalid mesh input."""


class MeshFormatError(MeshError):
    """Malformed OFF/OBJ text; carries the offending line number."""

    def __init__(self, msg, path=None, lineno=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {msg}" if where else msg)
        self.path = path
        self.lineno = lineno


class MeshTopologyError(MeshError):
    """Out-of-range indices, degenerate faces, non-manifold or flipped edges."""


def n_coeffs(degree):
    """Number of Taylor coefficients of a bivariate polynomial of ``degree``."""
    return (degree + 1) * (degree + 2) // 2


def check_ring(ring):
    ring = float(ring)
    if ring not in RING_LEVELS:
        raise ValueError(f"ring level must be one of {RING_LEVELS}, got {ring}")
    return ring


def _bool_product(a, b):
    c = (a @ b).tocsr()
    c.data[:] = 1
    c.eliminate_zeros()
    c.sort_indices()
    return c


class Mesh:
    """Immutable indexed triangle mesh.

    Parameters
    ----------
    vertices : (V, 3) array_like
        Vertex coordinates.
    faces : (F, 3) array_like of int
        Vertex indices per triangle, consistently oriented.
    validate : bool
        Check index range, degeneracy, edge manifoldness and orientation.

    Raises
    ------
    MeshTopologyError
        If validation fails.
    """

    def __init__(self, vertices, faces, validate=True):
        v = np.array(vertices, dtype=float).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.faces = f
        if validate:
            self._validate()

    def __repr__(self):
        return f"Mesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_edges(self):
        return len(self.edges)

    def _validate(self):
        f = self.faces
        nv = self.n_vertices
        bad = np.flatnonzero(((f < 0) | (f >= nv)).any(axis=1))
        if bad.size:
            i = bad[0]
            raise MeshTopologyError(
                f"face {i} {f[i].tolist()} references a vertex outside 0..{nv - 1}"
            )
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            i = np.flatnonzero(degenerate)[0]
            raise MeshTopologyError(f"face {i} {f[i].tolist()} is degenerate")
        if self.n_faces == 0:
            return
        counts = self._edge_data[2]
        if (counts > 2).any():
            e = self.edges[np.flatnonzero(counts > 2)[0]]
            raise MeshTopologyError(f"non-manifold edge {e.tolist()} has more than 2 faces")
        directed = self.halfedges
        uniq, dcount = np.unique(directed, axis=0, return_counts=True)
        if (dcount > 1).any():
            e = uniq[np.flatnonzero(dcount > 1)[0]]
            raise MeshTopologyError(f"inconsistent face orientation across edge {e.tolist()}")

    # ------------------------------------------------------------------
    # connectivity
    @cached_property
    def halfedges(self):
        """(3F, 2) directed edges, face ``i`` owning rows ``3i..3i+2``."""
        return self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)

    @cached_property
    def _edge_data(self):
        sorted_he = np.sort(self.halfedges, axis=1)
        edges, inverse, counts = np.unique(
            sorted_he, axis=0, return_inverse=True, return_counts=True
        )
        return edges, inverse.reshape(-1), counts

    @cached_property
    def edges(self):
        """(E, 2) undirected edges with ``e[0] < e[1]``."""
        return self._edge_data[0]

    @cached_property
    def boundary_vertices(self):
        edges, _, counts = self._edge_data
        return np.unique(edges[counts == 1])

    @cached_property
    def vertex_face_matrix(self):
        """Sparse (V, F) incidence matrix."""
        nf = self.n_faces
        rows = self.faces.reshape(-1)
        cols = np.repeat(np.arange(nf), 3)
        data = np.ones(rows.size, dtype=np.int32)
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n_vertices, nf))

    @cached_property
    def face_adjacency(self):
        """Sparse (F, F) matrix of faces sharing an edge."""
        _, inverse, _ = self._edge_data
        face_of = np.repeat(np.arange(self.n_faces), 3)
        order = np.argsort(inverse, kind="stable")
        e_sorted = inverse[order]
        f_sorted = face_of[order]
        # interior edges contribute consecutive pairs after sorting
        pair = np.flatnonzero(e_sorted[1:] == e_sorted[:-1])
        a, b = f_sorted[pair], f_sorted[pair + 1]
        data = np.ones(2 * a.size, dtype=np.int32)
        return sparse.csr_matrix(
            (data, (np.r_[a, b], np.r_[b, a])), shape=(self.n_faces, self.n_faces)
        )

    @cached_property
    def incident_faces(self):
        """List of incident face ids per vertex."""
        m = self.vertex_face_matrix
        return [m.indices[m.indptr[i]:m.indptr[i + 1]] for i in range(self.n_vertices)]

    def ring_matrix(self, ring):
        """Sparse boolean (V, V) matrix; row ``i`` is the ``ring`` of vertex ``i``."""
        ring = check_ring(ring)
        cache = self.__dict__.setdefault("_ring_cache", {})
        if ring in cache:
            return cache[ring]
        vf = self.vertex_face_matrix
        if ring == 1.0:
            out = _bool_product(vf, vf.T)
        elif ring == 1.5:
            spread = self.face_adjacency + sparse.identity(self.n_faces, dtype=np.int32, format="csr")
            out = _bool_product(_bool_product(vf, spread), vf.T)
        else:
            step = self.ring_matrix(1.0 if ring % 1 == 0 else 1.5)
            base = self.ring_matrix(np.floor(ring) - 1.0)
            out = _bool_product(base, step)
        # isolated vertices still contain themselves
        out = (out + sparse.identity(self.n_vertices, dtype=np.int32, format="csr")).tocsr()
        out.data[:] = 1
        out.sort_indices()
        cache[ring] = out
        return out

    def ring(self, vertex, ring):
        """Vertex ids of a ring neighborhood: center first, then ascending."""
        m = self.ring_matrix(ring)
        row = m.indices[m.indptr[vertex]:m.indptr[vertex + 1]]
        return np.r_[vertex, row[row != vertex]]

    def face_normals(self, unit=False):
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if unit:
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n

    def mean_edge_length(self):
        e = self.edges
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    # ------------------------------------------------------------------
    # IO
    def save(self, path, format=None):
        save_mesh(self, path, format=format)


def vertex_normals_averaged(mesh):
    """Area-weighted average of incident face normals, normalized.

    Raises
    ------
    MeshTopologyError
        If some vertex has no incident face.
    """
    fn = mesh.face_normals(unit=False)
    acc = mesh.vertex_face_matrix @ fn
    norm = np.linalg.norm(acc, axis=1)
    isolated = np.flatnonzero(norm == 0.0)
    if isolated.size:
        raise MeshTopologyError(
            f"cannot average normals at isolated vertices {isolated[:10].tolist()}"
        )
    return acc / norm[:, None]


def ring_neighborhood(mesh, vertex, ring):
    """Ring neighborhood of ``vertex`` (1, 1.5, ..., 3.5), center first.

    The 1-ring holds the vertices of incident faces, the 1.5-ring the
    vertices of faces sharing an edge with an incident face. Level
    ``k + 1`` adds the 1-rings of all ``k``-ring members and level
    ``k + 1.5`` their 1.5-rings.
    """
    return mesh.ring(vertex, ring)


def start_ring(degree):
    return (degree + 1) / 2.0


def select_fit_points(mesh, vertex, degree, ring_cap=3.5, upgrade=True):
    """Pick the fitting stencil for a degree-``degree`` fit.

    Starts from the ``(degree + 1) / 2`` ring and, when ``upgrade`` is on,
    widens it by half a ring while it holds fewer than ``1.5 n`` points,
    never beyond ``ring_cap``.

    Returns
    -------
    ids : ndarray of int
    ring : float
    """
    if not 1 <= degree <= 6:
        raise ValueError(f"degree must be within 1..6, got {degree}")
    ring = min(start_ring(degree), check_ring(ring_cap))
    ids = mesh.ring(vertex, ring)
    need = 1.5 * n_coeffs(degree)
    while upgrade and len(ids) < need and ring < ring_cap:
        ring += 0.5
        ids = mesh.ring(vertex, ring)
    return ids, ring


def select_fit_points_all(mesh, degree, ring_cap=3.5, upgrade=True):
    """Vectorized :func:`select_fit_points` over all vertices.

    Returns
    -------
    ids : (V, M) ndarray of int
        Stencil per vertex, center first then ascending, padded with -1.
    counts : (V,) ndarray of int
    rings : (V,) ndarray of float
    """
    if not 1 <= degree <= 6:
        raise ValueError(f"degree must be within 1..6, got {degree}")
    nv = mesh.n_vertices
    ring_cap = check_ring(ring_cap)
    need = 1.5 * n_coeffs(degree)
    rings = np.full(nv, min(start_ring(degree), ring_cap))
    level = rings[0]
    while True:
        m = mesh.ring_matrix(level)
        counts_here = np.diff(m.indptr)
        short = (rings == level) & (counts_here < need)
        if not upgrade or level >= ring_cap or not short.any():
            break
        level += 0.5
        rings[short] = level
    counts = np.zeros(nv, dtype=np.int64)
    for level in np.unique(rings):
        sel = rings == level
        counts[sel] = np.diff(mesh.ring_matrix(level).indptr)[sel]
    width = int(counts.max()) if nv else 0
    ids = np.full((nv, width), -1, dtype=np.int64)
    for level in np.unique(rings):
        sel = np.flatnonzero(rings == level)
        m = mesh.ring_matrix(level)
        starts = m.indptr[sel]
        cnt = counts[sel]
        col = np.arange(width)
        valid = col[None, :] < cnt[:, None]
        src = np.where(valid, starts[:, None] + col[None, :], 0)
        block = np.where(valid, m.indices[src], -1)
        # move the center to column 0, keep the rest ascending
        key = np.where(block == sel[:, None], 0, np.where(block < 0, 2, 1))
        order = np.argsort(key, axis=1, kind="stable")
        ids[sel] = np.take_along_axis(block, order, axis=1)
    return ids, counts, rings


def subdivide_1to4(mesh, project=None):
    """Split every face at its edge midpoints into four.

    Parameters
    ----------
    project : callable, optional
        Maps the new midpoint coordinates ``(E, 3)`` to their final
        positions (e.g. onto a sphere or graph surface).
    """
    v = mesh.vertices
    nv = mesh.n_vertices
    edges = mesh.edges
    mid = 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])
    if project is not None:
        mid = project(mid)
    inverse = mesh._edge_data[1].reshape(-1, 3) + nv
    f = mesh.faces
    # halfedge k of a face runs from corner k to corner k+1
    m01, m12, m20 = inverse[:, 0], inverse[:, 1], inverse[:, 2]
    new_faces = np.concatenate(
        [
            np.stack([f[:, 0], m01, m20], axis=1),
            np.stack([m01, f[:, 1], m12], axis=1),
            np.stack([m20, m12, f[:, 2]], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ]
    )
    return Mesh(np.vstack([v, mid]), new_faces, validate=False)


# ----------------------------------------------------------------------
# file formats

def _strip(line):
    return line.split("#", 1)[0].strip()


def _read_off(path):
    with open(path) as fh:
        lines = [(i + 1, _strip(l)) for i, l in enumerate(fh)]
    lines = [(i, l) for i, l in lines if l]
    if not lines or not lines[0][1].startswith("OFF"):
        raise MeshFormatError("missing OFF header", path, lines[0][0] if lines else 1)
    tokens = []
    head_rest = lines[0][1][3:].split()
    tokens.extend((lines[0][0], t) for t in head_rest)
    for i, l in lines[1:]:
        tokens.extend((i, t) for t in l.split())
    pos = 0

    def take(kind):
        nonlocal pos
        if pos >= len(tokens):
            raise MeshFormatError("unexpected end of file", path, tokens[-1][0] if tokens else 1)
        lineno, t = tokens[pos]
        pos += 1
        try:
            return kind(t), lineno
        except ValueError:
            raise MeshFormatError(f"cannot parse {t!r} as {kind.__name__}", path, lineno) from None

    (nv, _), (nf, _), (_ne, _) = take(int), take(int), take(int)
    verts = np.empty((nv, 3))
    for i in range(nv):
        for j in range(3):
            verts[i, j] = take(float)[0]
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        k, lineno = take(int)
        if k != 3:
            raise MeshFormatError(f"only triangles are supported, got {k}-gon", path, lineno)
        for j in range(3):
            faces[i, j] = take(int)[0]
    return verts, faces


def _read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = _strip(raw).split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) != 3:
                        raise MeshFormatError(
                            f"only triangles are supported, got {len(idx)}-gon", path, lineno
                        )
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            except ValueError:
                raise MeshFormatError(f"cannot parse line {raw.strip()!r}", path, lineno) from None
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _guess_format(path, format):
    if format is not None:
        return format.lower()
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix not in ("off", "obj"):
        raise MeshFormatError(f"cannot infer mesh format from suffix {suffix!r}", path)
    return suffix


def load_mesh(path, format=None):
    """Read an OFF or OBJ triangle mesh and validate it.

    Raises
    ------
    MeshFormatError
        Parse failures, with line numbers.
    MeshTopologyError
        Invalid connectivity.
    """
    fmt = _guess_format(path, format)
    if fmt == "off":
        v, f = _read_off(path)
    elif fmt == "obj":
        v, f = _read_obj(path)
    else:
        raise MeshFormatError(f"unsupported format {fmt!r}", path)
    logger.debug("read %d vertices, %d faces from %s", len(v), len(f), path)
    return Mesh(v, f)


def save_mesh(mesh, path, format=None):
    fmt = _guess_format(path, format)
    with open(path, "w") as fh:
        if fmt == "off":
            fh.write("OFF\n")
            fh.write(f"{mesh.n_vertices} {mesh.n_faces} {mesh.n_edges}\n")
            for x in mesh.vertices:
                fh.write(" ".join(repr(float(c)) for c in x) + "\n")
            for t in mesh.faces:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")
        elif fmt == "obj":
            for x in mesh.vertices:
                fh.write("v " + " ".join(repr(float(c)) for c in x) + "\n")
            for t in mesh.faces:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
        else:
            raise MeshFormatError(f"unsupported format {fmt!r}", path)
