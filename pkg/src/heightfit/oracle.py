"""Analytic test surfaces and mesh hierarchies over them.

Curvature signs follow the height-function convention used by the
estimator: a surface bending away from its normal has negative
curvature. With outward normals a sphere of radius ``rho`` therefore has
``kappa1 = kappa2 = -1/rho``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgeo
from .fitting import build_frames
from .mesh import Mesh, subdivide_1to4

__all__ = [
    "ExactQuantities",
    "Sphere",
    "Torus",
    "GraphSurface",
    "F1",
    "F2",
    "surface_by_name",
    "exact_at",
    "gen_sphere_mesh",
    "gen_torus_mesh",
    "gen_graph_mesh",
    "icosahedron",
]

ON_SURFACE_TOL = 1e-8


@dataclass(frozen=True)
class ExactQuantities:
    position: np.ndarray
    normal: np.ndarray
    kappa: np.ndarray
    kappaH: np.ndarray
    kappaG: np.ndarray
    dir1: np.ndarray
    dir2: np.ndarray
    tensor: np.ndarray
    umbilic: np.ndarray

    @property
    def kappa1(self):
        return self.kappa[..., 0]

    @property
    def kappa2(self):
        return self.kappa[..., 1]


def _tensor(kappa, d1, d2):
    return (
        kappa[..., 0, None, None] * d1[..., :, None] * d1[..., None, :]
        + kappa[..., 1, None, None] * d2[..., :, None] * d2[..., None, :]
    )


def _orient(vec):
    k = np.argmax(np.abs(vec), axis=-1)
    lead = np.take_along_axis(vec, k[..., None], axis=-1)
    return np.where(lead < 0.0, -vec, vec)


@dataclass(frozen=True)
class Sphere:
    radius: float = 1.0
    name = "sphere"
    orientation = "outward"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def exact(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(p, axis=-1)
        if np.any(np.abs(r - self.radius) > ON_SURFACE_TOL * max(1.0, self.radius)):
            raise ValueError("sample point is not on the sphere")
        n = p / r[..., None]
        frames = build_frames(n)
        k = -1.0 / self.radius
        kappa = np.full(p.shape[:-1] + (2,), k)
        d1, d2 = frames[..., 0], frames[..., 1]
        return ExactQuantities(
            position=p, normal=n, kappa=kappa,
            kappaH=np.full(p.shape[:-1], k), kappaG=np.full(p.shape[:-1], k * k),
            dir1=d1, dir2=d2, tensor=_tensor(kappa, d1, d2),
            umbilic=np.ones(p.shape[:-1], dtype=bool),
        )


@dataclass(frozen=True)
class Torus:
    """Torus around the z axis with center radius ``R`` and tube radius ``r``."""

    R: float = 1.0
    r: float = 0.3
    name = "torus"
    orientation = "outward"

    def __post_init__(self):
        if not self.R > self.r > 0:
            raise ValueError("torus radii must satisfy R > r > 0")

    def point(self, phi, psi):
        rho = self.R + self.r * np.cos(psi)
        return np.stack([rho * np.cos(phi), rho * np.sin(phi), self.r * np.sin(psi)], axis=-1)

    def angles(self, points):
        p = np.asarray(points, dtype=float)
        phi = np.arctan2(p[..., 1], p[..., 0])
        psi = np.arctan2(p[..., 2], np.hypot(p[..., 0], p[..., 1]) - self.R)
        return phi, psi

    def exact(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        phi, psi = self.angles(p)
        if np.any(np.linalg.norm(self.point(phi, psi) - p, axis=-1) > ON_SURFACE_TOL):
            raise ValueError("sample point is not on the torus")
        cphi, sphi, cpsi, spsi = np.cos(phi), np.sin(phi), np.cos(psi), np.sin(psi)
        n = np.stack([cpsi * cphi, cpsi * sphi, spsi], axis=-1)
        e_phi = np.stack([-sphi, cphi, np.zeros_like(phi)], axis=-1)
        e_psi = np.stack([-spsi * cphi, -spsi * sphi, cpsi], axis=-1)
        k_phi = -cpsi / (self.R + self.r * cpsi)
        k_psi = np.full_like(k_phi, -1.0 / self.r)
        # k_psi is always the smaller signed value since R > r
        kappa = np.stack([k_phi, k_psi], axis=-1)
        d1, d2 = _orient(e_phi), _orient(e_psi)
        return ExactQuantities(
            position=p, normal=n, kappa=kappa,
            kappaH=0.5 * (k_phi + k_psi), kappaG=k_phi * k_psi,
            dir1=d1, dir2=d2, tensor=_tensor(kappa, d1, d2),
            umbilic=np.zeros(p.shape[:-1], dtype=bool),
        )


@dataclass(frozen=True)
class GraphSurface:
    """Graph ``z = F(x, y)`` over the unit square with upward normals."""

    name: str
    func: object
    derivs: object
    orientation = "upward"

    def height(self, x, y):
        return self.func(x, y)

    def grad_hess(self, x, y):
        fx, fy, fxx, fxy, fyy = self.derivs(x, y)
        grad = np.stack([fx, fy], axis=-1)
        hess = np.stack([np.stack([fxx, fxy], -1), np.stack([fxy, fyy], -1)], -2)
        return grad, hess

    def exact(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        x, y = p[..., 0], p[..., 1]
        tol = 1e-12
        if np.any((x < -tol) | (x > 1 + tol) | (y < -tol) | (y > 1 + tol)):
            raise ValueError(f"sample outside the unit square domain of {self.name}")
        if np.any(np.abs(self.func(x, y) - p[..., 2]) > ON_SURFACE_TOL):
            raise ValueError(f"sample point is not on the graph of {self.name}")
        grad, hess = self.grad_hess(x, y)
        _, n = diffgeo.normal_from_gradient(grad)
        shape = diffgeo.symmetric_shape_operator(grad, hess)
        kappa, d1, d2 = diffgeo.principal(shape)
        kh, kg = diffgeo.mean_gaussian(grad, hess)
        _, tensor = diffgeo.curvature_tensor(grad, hess)
        return ExactQuantities(
            position=p, normal=n, kappa=kappa, kappaH=kh, kappaG=kg,
            dir1=d1, dir2=d2, tensor=tensor, umbilic=diffgeo.umbilic_mask(kappa),
        )


def _f1(x, y):
    return (1.25 + np.cos(5.4 * y)) / (6.0 + 6.0 * (3.0 * x - 1.0) ** 2)


def _f1_derivs(x, y):
    a = 1.25 + np.cos(5.4 * y)
    da = -5.4 * np.sin(5.4 * y)
    dda = -5.4 * 5.4 * np.cos(5.4 * y)
    b = 6.0 + 6.0 * (3.0 * x - 1.0) ** 2
    db = 36.0 * (3.0 * x - 1.0)
    ddb = 108.0
    fx = -a * db / b**2
    fxx = a * (2.0 * db * db / b**3 - ddb / b**2)
    fy = da / b
    fyy = dda / b
    fxy = -da * db / b**2
    return fx, fy, fxx, fxy, fyy


_K2 = 81.0 / 16.0


def _f2(x, y):
    return np.exp(-_K2 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))


def _f2_derivs(x, y):
    f = _f2(x, y)
    dx, dy = x - 0.5, y - 0.5
    fx = -2.0 * _K2 * dx * f
    fy = -2.0 * _K2 * dy * f
    fxx = (4.0 * _K2**2 * dx * dx - 2.0 * _K2) * f
    fyy = (4.0 * _K2**2 * dy * dy - 2.0 * _K2) * f
    fxy = 4.0 * _K2**2 * dx * dy * f
    return fx, fy, fxx, fxy, fyy


F1 = GraphSurface("f1", _f1, _f1_derivs)
F2 = GraphSurface("f2", _f2, _f2_derivs)


def surface_by_name(name):
    name = name.lower()
    table = {"sphere": Sphere(), "torus": Torus(), "f1": F1, "f2": F2}
    if name not in table:
        raise ValueError(f"unknown surface {name!r}; expected one of {sorted(table)}")
    return table[name]


def exact_at(surface, points):
    """Exact differential quantities of ``surface`` at points on it."""
    return surface.exact(points)


# ----------------------------------------------------------------------
# mesh generators

def icosahedron():
    """Regular icosahedron inscribed in the unit sphere, outward oriented."""
    t = (1.0 + 5.0**0.5) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return Mesh(v, f)


def _check_level(level, top):
    if not 0 <= int(level) <= top:
        raise ValueError(f"level must be within 0..{top}, got {level}")
    return int(level)


def gen_sphere_mesh(level, radius=1.0):
    """Icosphere: ``level`` rounds of 1-to-4 subdivision, projected each round."""
    level = _check_level(level, 7)
    mesh = icosahedron()
    project = lambda p: radius * p / np.linalg.norm(p, axis=1, keepdims=True)
    if radius != 1.0:
        mesh = Mesh(mesh.vertices * radius, mesh.faces, validate=False)
    for _ in range(level):
        mesh = subdivide_1to4(mesh, project=project)
    return mesh


def _grid_faces(ni, nj, wrap_i, wrap_j, pick_bd=None):
    """Two triangles per cell of an ``ni x nj`` vertex grid (index ``i*nj + j``).

    ``pick_bd`` marks cells that use the (i+1, j)-(i, j+1) diagonal.
    """
    ci = ni if wrap_i else ni - 1
    cj = nj if wrap_j else nj - 1
    i, j = np.meshgrid(np.arange(ci), np.arange(cj), indexing="ij")
    i, j = i.ravel(), j.ravel()
    ip = (i + 1) % ni
    jp = (j + 1) % nj
    a, b, c, d = i * nj + j, ip * nj + j, ip * nj + jp, i * nj + jp
    if pick_bd is None:
        pick_bd = np.zeros(a.shape, dtype=bool)
    else:
        pick_bd = np.asarray(pick_bd).ravel()
    t1 = np.where(pick_bd[:, None], np.stack([a, b, d], 1), np.stack([a, b, c], 1))
    t2 = np.where(pick_bd[:, None], np.stack([b, c, d], 1), np.stack([a, c, d], 1))
    return np.concatenate([t1, t2]), (a, b, c, d)


def gen_torus_mesh(level, jitter=False, seed=0, R=1.0, r=0.3):
    """Structured torus mesh with ``48*2^level x 16*2^level`` vertices.

    With ``jitter`` the grid angles are perturbed by up to 0.3 cells and
    each quad is split along its shorter diagonal.
    """
    level = _check_level(level, 7)
    torus = Torus(R, r)
    n_major, n_minor = 48 * 2**level, 16 * 2**level
    phi = 2.0 * np.pi * np.arange(n_major) / n_major
    psi = 2.0 * np.pi * np.arange(n_minor) / n_minor
    phi, psi = np.meshgrid(phi, psi, indexing="ij")
    if jitter:
        rng = np.random.default_rng(seed)
        phi = phi + rng.uniform(-0.3, 0.3, phi.shape) * (2.0 * np.pi / n_major)
        psi = psi + rng.uniform(-0.3, 0.3, psi.shape) * (2.0 * np.pi / n_minor)
    verts = torus.point(phi.ravel(), psi.ravel())
    pick = None
    if jitter:
        _, (a, b, c, d) = _grid_faces(n_major, n_minor, True, True)
        ac = np.linalg.norm(verts[a] - verts[c], axis=1)
        bd = np.linalg.norm(verts[b] - verts[d], axis=1)
        pick = bd < ac
    faces, _ = _grid_faces(n_major, n_minor, True, True, pick)
    return Mesh(verts, faces)


def gen_graph_mesh(which, style="irregular", level=0, seed=0, base=8):
    """Triangulation of the unit square lifted onto a graph surface.

    ``semiregular``: regular right-triangle grid with ``base * 2^level``
    cells per side. ``irregular``: a jittered ``base x base`` grid split
    along shorter diagonals, then ``level`` rounds of 1-to-4 subdivision.
    """
    level = _check_level(level, 6)
    surf = which if isinstance(which, GraphSurface) else surface_by_name(which)
    if not isinstance(surf, GraphSurface):
        raise ValueError(f"{which!r} is not a graph surface")
    if style == "semiregular":
        n = base * 2**level
        x, y = np.meshgrid(np.linspace(0, 1, n + 1), np.linspace(0, 1, n + 1), indexing="ij")
        xy = np.c_[x.ravel(), y.ravel()]
        faces, _ = _grid_faces(n + 1, n + 1, False, False)
        mesh = Mesh(np.c_[xy, np.zeros(len(xy))], faces)
    elif style == "irregular":
        n = base
        x, y = np.meshgrid(np.linspace(0, 1, n + 1), np.linspace(0, 1, n + 1), indexing="ij")
        rng = np.random.default_rng(seed)
        amp = 0.3 / n
        dx = rng.uniform(-amp, amp, x.shape)
        dy = rng.uniform(-amp, amp, y.shape)
        # boundary vertices slide along their edge only; corners stay put
        dx[[0, -1], :] = 0.0
        dy[:, [0, -1]] = 0.0
        x, y = x + dx, y + dy
        xy = np.c_[x.ravel(), y.ravel()]
        _, (a, b, c, d) = _grid_faces(n + 1, n + 1, False, False)
        ac = np.linalg.norm(xy[a] - xy[c], axis=1)
        bd = np.linalg.norm(xy[b] - xy[d], axis=1)
        faces, _ = _grid_faces(n + 1, n + 1, False, False, bd < ac)
        mesh = Mesh(np.c_[xy, np.zeros(len(xy))], faces)
        for _ in range(level):
            mesh = subdivide_1to4(mesh)
    else:
        raise ValueError(f"style must be 'irregular' or 'semiregular', got {style!r}")
    v = mesh.vertices.copy()
    v[:, 2] = surf.height(v[:, 0], v[:, 1])
    return Mesh(v, mesh.faces, validate=False)
