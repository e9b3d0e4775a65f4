"""Weighted least-squares fitting of local height functions.

The per-vertex functions (:func:`fit_height`, :func:`iterative_fit`,
:func:`safeguarded_solve`) follow one stencil at a time. The mesh-wide
versions (:func:`fit_heights`, :func:`iterative_fits`) run the same
algorithm on padded stacks of stencils; zero-weight padding rows leave
the Householder factors unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .diffgeo import GAMMA_MIN, GradHess
from .linalg import (
    apply_qt,
    householder_reflectors,
    inv_upper,
    solve_upper,
)
from .mesh import check_ring, n_coeffs, select_fit_points, select_fit_points_all

logger = logging.getLogger(__name__)

__all__ = [
    "FitFailedError",
    "FitConfig",
    "FitResult",
    "LocalFrame",
    "HeightFits",
    "monomial_exponents",
    "coeff_index",
    "build_local_frame",
    "build_frames",
    "to_local",
    "to_global",
    "assemble_vandermonde",
    "compute_weights",
    "column_scale",
    "safeguarded_solve",
    "fit_height",
    "iterative_fit",
    "fit_heights",
    "iterative_fits",
]

# upper bound on floats per stacked solve, keeps memory around 100 MB
_CHUNK_FLOATS = 4_000_000


class FitFailedError(RuntimeError):
    """Not even a linear fit could be computed from the stencil."""


@dataclass(frozen=True)
class FitConfig:
    degree: int = 2
    weighting: bool = True
    iterative: bool = False
    conditioning: bool = True
    cond_threshold: float = 1e3
    ring_cap: float = 3.5

    def __post_init__(self):
        if not 1 <= int(self.degree) <= 6:
            raise ValueError(f"degree must be within 1..6, got {self.degree}")
        if not self.cond_threshold > 1.0:
            raise ValueError(f"cond_threshold must exceed 1, got {self.cond_threshold}")
        check_ring(self.ring_cap)


@dataclass(frozen=True)
class LocalFrame:
    """Origin and orthogonal frame ``[t1 | t2 | m]`` (axes as columns)."""

    origin: np.ndarray
    frame: np.ndarray

    @property
    def normal(self):
        return self.frame[:, 2]


@dataclass(frozen=True)
class FitResult:
    """Taylor coefficients ``c_jk`` of a fitted height function.

    ``coeffs`` follows :func:`monomial_exponents` for ``achieved_degree``.
    """

    coeffs: np.ndarray
    requested_degree: int
    achieved_degree: int
    ring_used: float
    cond_estimate: float
    point_count: int

    def coeff(self, j, k):
        if j + k > self.achieved_degree:
            return 0.0
        return float(self.coeffs[coeff_index(j, k)])

    @property
    def gradient(self):
        return np.array([self.coeff(1, 0), self.coeff(0, 1)])

    @property
    def hessian(self):
        c11 = self.coeff(1, 1)
        return np.array([[self.coeff(2, 0), c11], [c11, self.coeff(0, 2)]])


def monomial_exponents(degree):
    """Exponents ``(j, k)`` ordered by total degree, then decreasing ``j``."""
    return [(p - k, k) for p in range(degree + 1) for k in range(p + 1)]


def coeff_index(j, k):
    p = j + k
    return p * (p + 1) // 2 + k


# ----------------------------------------------------------------------
# frames

def build_frames(normals):
    """Right-handed orthonormal frames with third axis ``normals``.

    The first axis is the normalized projection of the global axis least
    aligned with the normal.
    """
    m = np.asarray(normals, dtype=float)
    axis = np.argmin(np.abs(m), axis=-1)
    e = np.zeros(m.shape)
    np.put_along_axis(e, axis[..., None], 1.0, axis=-1)
    t1 = e - (e * m).sum(axis=-1, keepdims=True) * m
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(m, t1)
    return np.stack([t1, t2, m], axis=-1)


def build_local_frame(origin, approx_normal):
    """Local ``uvw`` frame at ``origin`` whose ``w`` axis is ``approx_normal``.

    Raises
    ------
    ValueError
        If ``approx_normal`` is zero or not of unit length.
    """
    n = np.asarray(approx_normal, dtype=float)
    norm = np.linalg.norm(n)
    if norm == 0.0 or abs(norm - 1.0) > 1e-10:
        raise ValueError(f"approximate normal must be a unit vector, got norm {norm}")
    return LocalFrame(origin=np.asarray(origin, dtype=float).copy(), frame=build_frames(n))


def to_local(frame, points):
    """``(u, v, f)`` coordinates ``Q^T (x - x0)`` of global points."""
    p = np.asarray(points, dtype=float) - frame.origin
    return p @ frame.frame


def to_global(frame, local):
    return np.asarray(local, dtype=float) @ frame.frame.T + frame.origin


# ----------------------------------------------------------------------
# linear system pieces

def assemble_vandermonde(points, degree):
    """Generalized Vandermonde matrix with scaled monomials ``u^j v^k / (j! k!)``.

    Parameters
    ----------
    points : (..., m, 2) or (..., m, 3) array_like
        Local coordinates; a third column is returned as the right-hand side.

    Returns
    -------
    V : (..., m, n) ndarray
    f : (..., m) ndarray or None
    """
    pts = np.asarray(points, dtype=float)
    u, v = pts[..., 0], pts[..., 1]
    upow = [np.ones_like(u)]
    vpow = [np.ones_like(v)]
    for _ in range(degree):
        upow.append(upow[-1] * u)
        vpow.append(vpow[-1] * v)
    cols = [
        upow[j] * vpow[k] / (factorial(j) * factorial(k))
        for j, k in monomial_exponents(degree)
    ]
    f = pts[..., 2].copy() if pts.shape[-1] > 2 else None
    return np.stack(cols, axis=-1), f


def compute_weights(points, neighbor_normals, degree, mask=None):
    """Row weights ``max(0, n_i . n_0) / (|u_i|^2 + eps)^(d/4)``.

    ``eps`` is 1/100 of the mean squared distance ``|u_i|^2`` over the
    stencil. Normals are given in the local frame, so ``n_0 = (0, 0, 1)``.

    Parameters
    ----------
    points : (..., m, >=2) array_like
    neighbor_normals : (..., m, 3) array_like
    mask : (..., m) bool, optional
        Marks real rows when stencils are padded.
    """
    pts = np.asarray(points, dtype=float)
    r2 = pts[..., 0] ** 2 + pts[..., 1] ** 2
    gamma = np.maximum(0.0, np.asarray(neighbor_normals, dtype=float)[..., 2])
    if mask is None:
        mask = np.ones(r2.shape, dtype=bool)
    r2 = np.where(mask, r2, 0.0)
    count = np.maximum(mask.sum(axis=-1), 1)
    eps = r2.sum(axis=-1) / (100.0 * count)
    eps = np.where(eps > 0.0, eps, 1.0)[..., None]
    w = gamma * (r2 + eps) ** (-degree / 4.0)
    return np.where(mask, w, 0.0)


def column_scale(a):
    """Reciprocal column 2-norms; zero columns get 1 and are flagged.

    Returns
    -------
    s : (..., n) ndarray
    zero : (..., n) bool ndarray
    """
    norms = np.linalg.norm(np.asarray(a, dtype=float), axis=-2)
    zero = norms == 0.0
    return 1.0 / np.where(zero, 1.0, norms), zero


# ----------------------------------------------------------------------
# safeguarded solve

def _block_conds(r, rinv, degree):
    """1-norm condition numbers of the leading degree blocks, (B, degree)."""
    out = np.empty(r.shape[:-2] + (degree,))
    diag = np.diagonal(r, axis1=-2, axis2=-1)
    with np.errstate(invalid="ignore"):
        for d in range(1, degree + 1):
            k = n_coeffs(d)
            nr = np.abs(r[..., :k, :k]).sum(axis=-2).max(axis=-1)
            ni = np.abs(rinv[..., :k, :k]).sum(axis=-2).max(axis=-1)
            bad = (diag[..., :k] == 0.0).any(axis=-1) | ~np.isfinite(ni)
            out[..., d - 1] = np.where(bad, np.inf, nr * ni)
    return out


def _solve_stack(vmat, rhs, w, degree, conditioning=True, cond_threshold=1e3):
    """Safeguarded weighted least squares for a stack of stencils.

    Parameters
    ----------
    vmat : (B, M, n) ndarray
    rhs : (B, M) or (B, M, k) ndarray
    w : (B, M) ndarray
        Nonnegative weights; zero rows take no part in the fit.

    Returns
    -------
    dict with ``coeffs`` (B, n[, k]) zero-padded past the achieved degree,
    ``achieved`` (B,), ``cond`` at the achieved degree, ``cond_full`` at the
    largest degree the point count allows, and ``failed`` (B,) bool.
    """
    b, m, n = vmat.shape
    vector = rhs.ndim == 2
    rhs3 = rhs[..., None] if vector else rhs
    a = w[..., None] * vmat
    bw = w[..., None] * rhs3
    if m < n:
        a = np.concatenate([a, np.zeros((b, n - m, n))], axis=1)
        bw = np.concatenate([bw, np.zeros((b, n - m, bw.shape[-1]))], axis=1)
    s, _ = column_scale(a)
    vs, r = householder_reflectors(a * s[:, None, :])
    sign = np.where(np.diagonal(r, axis1=-2, axis2=-1) < 0.0, -1.0, 1.0)
    r = r * sign[..., None]
    qtb = apply_qt(vs, bw) * sign[..., None]
    rinv = inv_upper(r)
    conds = _block_conds(r, rinv, degree)

    npos = (w > 0.0).sum(axis=-1)
    cap = np.zeros(b, dtype=np.int64)
    for d in range(1, degree + 1):
        cap[npos >= n_coeffs(d)] = d
    levels = np.arange(1, degree + 1)
    allowed = levels[None, :] <= cap[:, None]
    if conditioning:
        ok = allowed & (conds < cond_threshold)
        achieved = np.where(ok.any(axis=1), (ok * levels).max(axis=1), np.minimum(cap, 1))
    else:
        achieved = cap
    idx = np.clip(achieved - 1, 0, degree - 1)
    rows = np.arange(b)
    cond = conds[rows, idx]
    cond_full = conds[rows, np.clip(cap - 1, 0, degree - 1)]
    failed = (achieved < 1) | ~np.isfinite(cond)
    cond = np.where(achieved < 1, np.inf, cond)

    coeffs = np.zeros((b, n, rhs3.shape[-1]))
    for d in range(1, degree + 1):
        sel = np.flatnonzero((achieved == d) & ~failed)
        if sel.size == 0:
            continue
        k = n_coeffs(d)
        x = solve_upper(r[sel, :k, :k], qtb[sel, :k])
        coeffs[sel, :k] = s[sel, :k, None] * x
    if vector:
        coeffs = coeffs[..., 0]
    return {
        "coeffs": coeffs,
        "achieved": np.where(failed, 0, achieved),
        "cond": cond,
        "cond_full": cond_full,
        "failed": failed,
    }


def _degree_of(n):
    for d in range(1, 7):
        if n_coeffs(d) == n:
            return d
    raise ValueError(f"{n} columns is not a full bivariate polynomial basis")


def safeguarded_solve(V, f, weights, config=None, ring_used=None):
    """Weighted, column-scaled QR least squares with degree reduction.

    Forms ``A = diag(w) V`` and ``b = diag(w) f``, scales the columns of
    ``A`` to unit norm and factorizes. While the 1-norm condition number of
    ``R`` is at least ``config.cond_threshold`` the highest-degree block of
    columns is dropped (reusing the factorization). The degree is also
    lowered until the number of positively weighted rows covers the
    unknowns.

    Raises
    ------
    FitFailedError
        With fewer than 3 positively weighted points or a singular linear block.
    """
    config = config or FitConfig()
    V = np.asarray(V, dtype=float)
    f = np.asarray(f, dtype=float)
    w = np.asarray(weights, dtype=float)
    degree = _degree_of(V.shape[1])
    keep = w > 0.0
    if keep.sum() < 3:
        raise FitFailedError(f"only {int(keep.sum())} positively weighted points")
    out = _solve_stack(
        V[keep][None], f[keep][None], w[keep][None], degree,
        conditioning=config.conditioning, cond_threshold=config.cond_threshold,
    )
    if out["failed"][0]:
        raise FitFailedError("linear least-squares block is singular")
    d = int(out["achieved"][0])
    if config.conditioning and out["cond"][0] >= config.cond_threshold:
        logger.warning("linear fit is ill-conditioned (cond %.3g)", out["cond"][0])
    return FitResult(
        coeffs=out["coeffs"][0, :n_coeffs(d)],
        requested_degree=degree,
        achieved_degree=d,
        ring_used=ring_used,
        cond_estimate=float(out["cond"][0]),
        point_count=int(keep.sum()),
    )


# ----------------------------------------------------------------------
# per-vertex driver

def _stencil_local(mesh, vertex, approx_normals, config):
    ids, ring = select_fit_points(
        mesh, vertex, config.degree, ring_cap=config.ring_cap, upgrade=config.conditioning
    )
    frame = build_local_frame(mesh.vertices[vertex], approx_normals[vertex])
    local = to_local(frame, mesh.vertices[ids])
    return ids, ring, frame, local


def _weights_for(local, normals_local, config):
    if config.weighting:
        return compute_weights(local, normals_local, config.degree)
    return np.ones(len(local))


def fit_height(mesh, vertex, approx_normals, config=None):
    """Fit the height function at one vertex.

    Returns
    -------
    FitResult, LocalFrame
    """
    config = config or FitConfig()
    approx_normals = np.asarray(approx_normals, dtype=float)
    ids, ring, frame, local = _stencil_local(mesh, vertex, approx_normals, config)
    V, f = assemble_vandermonde(local, config.degree)
    w = _weights_for(local, approx_normals[ids] @ frame.frame, config)
    return safeguarded_solve(V, f, w, config, ring_used=ring), frame


def iterative_fit(mesh, vertex, frame, fitted_normals, config=None, approx_normals=None, grad=None):
    """Refit the Hessian at one vertex from its neighbors' normals.

    Each neighbor normal ``(a, b, c)`` (local frame) gives gradient samples
    ``-a/c`` and ``-b/c``; both are fitted with the same weighted matrix as
    the position fit and the mixed derivative is averaged.

    Parameters
    ----------
    fitted_normals : (V, 3) array_like
        Unit normals in global coordinates from a previous fit.
    approx_normals : (V, 3) array_like, optional
        Normals for the row weights; defaults to ``fitted_normals``.
    grad : (2,) array_like, optional
        Gradient from the position fit; recomputed when omitted.
    """
    config = config or FitConfig()
    fitted_normals = np.asarray(fitted_normals, dtype=float)
    weight_normals = fitted_normals if approx_normals is None else np.asarray(approx_normals, float)
    ids, ring = select_fit_points(
        mesh, vertex, config.degree, ring_cap=config.ring_cap, upgrade=config.conditioning
    )
    local = to_local(frame, mesh.vertices[ids])
    V, _ = assemble_vandermonde(local, config.degree)
    w = _weights_for(local, weight_normals[ids] @ frame.frame, config)
    n_loc = fitted_normals[ids] @ frame.frame
    gamma = n_loc[:, 2]
    valid = gamma > GAMMA_MIN
    w = np.where(valid, w, 0.0)
    rhs = -n_loc[:, :2] / np.where(valid, gamma, 1.0)[:, None]
    rhs = np.where(valid[:, None], rhs, 0.0)
    keep = w > 0.0
    if keep.sum() < 3:
        raise FitFailedError(f"only {int(keep.sum())} usable neighbor normals")
    out = _solve_stack(
        V[keep][None], rhs[keep][None], w[keep][None], config.degree,
        conditioning=config.conditioning, cond_threshold=config.cond_threshold,
    )
    if out["failed"][0]:
        raise FitFailedError("gradient fit is singular")
    hess = _hessian_from_gradient_fit(out["coeffs"])[0]
    if grad is None:
        res, _ = fit_height(mesh, vertex, weight_normals, config)
        grad = res.gradient
    return GradHess(grad=np.asarray(grad, dtype=float), hess=hess)


def _hessian_from_gradient_fit(coeffs):
    a, b = coeffs[..., 0], coeffs[..., 1]
    a10, a01 = a[..., coeff_index(1, 0)], a[..., coeff_index(0, 1)]
    b10, b01 = b[..., coeff_index(1, 0)], b[..., coeff_index(0, 1)]
    mixed = 0.5 * (a01 + b10)
    return np.stack([np.stack([a10, mixed], -1), np.stack([mixed, b01], -1)], -2)


# ----------------------------------------------------------------------
# mesh-wide driver

@dataclass
class HeightFits:
    """Position fits for every vertex of a mesh."""

    degree: int
    ids: np.ndarray
    counts: np.ndarray
    rings: np.ndarray
    frames: np.ndarray
    local: np.ndarray
    weights: np.ndarray
    coeffs: np.ndarray
    achieved: np.ndarray
    cond: np.ndarray
    cond_full: np.ndarray
    failed: np.ndarray
    reasons: dict = field(default_factory=dict)

    @property
    def grad(self):
        return self.coeffs[:, 1:3].copy()

    @property
    def hess(self):
        h = np.zeros((len(self.coeffs), 2, 2))
        if self.degree >= 2:
            has = self.achieved >= 2
            c = self.coeffs
            h[:, 0, 0] = np.where(has, c[:, coeff_index(2, 0)], 0.0)
            h[:, 1, 1] = np.where(has, c[:, coeff_index(0, 2)], 0.0)
            off = np.where(has, c[:, coeff_index(1, 1)], 0.0)
            h[:, 0, 1] = off
            h[:, 1, 0] = off
        return h


def _chunks(total, width, n):
    size = max(1, _CHUNK_FLOATS // max(1, width * n))
    for start in range(0, total, size):
        yield slice(start, min(total, start + size))


def fit_heights(mesh, approx_normals, config=None):
    """Position fits at all vertices (steps 2 and 3 of the estimation loop)."""
    config = config or FitConfig()
    x = mesh.vertices
    nrm = np.asarray(approx_normals, dtype=float)
    ids, counts, rings = select_fit_points_all(
        mesh, config.degree, ring_cap=config.ring_cap, upgrade=config.conditioning
    )
    mask = ids >= 0
    safe = np.where(mask, ids, 0)
    frames = build_frames(nrm)
    local = (x[safe] - x[:, None, :]) @ frames
    local[~mask] = 0.0
    if config.weighting:
        gamma_n = nrm[safe] @ frames
        weights = compute_weights(local, gamma_n, config.degree, mask)
    else:
        weights = mask.astype(float)
    n = n_coeffs(config.degree)
    nv = mesh.n_vertices
    coeffs = np.zeros((nv, n))
    achieved = np.zeros(nv, dtype=np.int64)
    cond = np.zeros(nv)
    cond_full = np.zeros(nv)
    failed = np.zeros(nv, dtype=bool)
    for sl in _chunks(nv, ids.shape[1], n):
        vmat, f = assemble_vandermonde(local[sl], config.degree)
        out = _solve_stack(
            vmat, f, weights[sl], config.degree,
            conditioning=config.conditioning, cond_threshold=config.cond_threshold,
        )
        coeffs[sl] = out["coeffs"]
        achieved[sl] = out["achieved"]
        cond[sl] = out["cond"]
        cond_full[sl] = out["cond_full"]
        failed[sl] = out["failed"]
    reasons = {}
    for i in np.flatnonzero(failed):
        npos = int((weights[i] > 0).sum())
        reasons[int(i)] = (
            f"only {npos} positively weighted points" if npos < 3 else "singular linear block"
        )
    if failed.any():
        logger.warning("position fit failed at %d vertices", int(failed.sum()))
    if config.conditioning:
        bad = int((~failed & (cond >= config.cond_threshold)).sum())
        if bad:
            logger.warning("%d vertices kept an ill-conditioned linear fit", bad)
    return HeightFits(
        degree=config.degree, ids=ids, counts=counts, rings=rings, frames=frames,
        local=local, weights=weights, coeffs=coeffs, achieved=achieved, cond=cond,
        cond_full=cond_full, failed=failed, reasons=reasons,
    )


def iterative_fits(fits, fitted_normals, config=None):
    """Hessians from fitting neighbor normals (step 4), for all vertices.

    Returns
    -------
    hess : (V, 2, 2) ndarray
    failed : (V,) bool ndarray
    """
    config = config or FitConfig()
    nrm = np.asarray(fitted_normals, dtype=float)
    mask = fits.ids >= 0
    safe = np.where(mask, fits.ids, 0)
    nv = len(fits.ids)
    n = n_coeffs(config.degree)
    hess = np.zeros((nv, 2, 2))
    failed = np.zeros(nv, dtype=bool)
    for sl in _chunks(nv, fits.ids.shape[1], n):
        n_loc = nrm[safe[sl]] @ fits.frames[sl]
        gamma = n_loc[..., 2]
        valid = mask[sl] & (gamma > GAMMA_MIN)
        rhs = -n_loc[..., :2] / np.where(valid, gamma, 1.0)[..., None]
        rhs = np.where(valid[..., None], rhs, 0.0)
        w = np.where(valid, fits.weights[sl], 0.0)
        vmat, _ = assemble_vandermonde(fits.local[sl], config.degree)
        out = _solve_stack(
            vmat, rhs, w, config.degree,
            conditioning=config.conditioning, cond_threshold=config.cond_threshold,
        )
        hess[sl] = _hessian_from_gradient_fit(out["coeffs"])
        failed[sl] = out["failed"]
    return hess, failed
