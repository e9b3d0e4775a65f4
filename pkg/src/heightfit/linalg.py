"""Small dense linear algebra kernels.

Every routine accepts stacked inputs: a leading batch shape ``(...)`` in
front of the matrix dimensions is carried through unchanged, so a whole
mesh worth of per-vertex problems can be handled by one call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SingularMatrixError",
    "JacobianSVD",
    "householder_qr",
    "householder_reflectors",
    "apply_qt",
    "cond1_upper_triangular",
    "inv_upper",
    "solve_upper",
    "eig_sym2",
    "jacobian_svd",
]

# below this gradient norm the SVD angle is pinned to zero
GRAD_ZERO_TOL = 1e-14


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a triangular system has an exactly zero pivot."""


def householder_reflectors(a):
    """Householder triangularization without forming Q.

    Parameters
    ----------
    a : (..., m, n) array_like
        Input with ``m >= n``.

    Returns
    -------
    vs : (..., m, n) ndarray
        Unit reflector vectors; column ``k`` is nonzero only in rows ``k:``.
        A zero column means the reflection was skipped.
    r : (..., n, n) ndarray
        Upper triangular factor *before* the sign normalization.
    """
    r = np.array(a, dtype=float)
    *batch, m, n = r.shape
    if m < n:
        raise ValueError(f"householder_qr needs m >= n, got {m}x{n}")
    vs = np.zeros(r.shape)
    for k in range(n):
        x = r[..., k:, k]
        normx = np.linalg.norm(x, axis=-1)
        alpha = np.where(x[..., 0] >= 0.0, -normx, normx)
        v = x.copy()
        v[..., 0] -= alpha
        vn = np.linalg.norm(v, axis=-1)
        v /= np.where(vn > 0.0, vn, 1.0)[..., None]
        proj = v[..., None, :] @ r[..., k:, k:]
        r[..., k:, k:] -= 2.0 * v[..., :, None] * proj
        vs[..., k:, k] = v
    return vs, np.triu(r[..., :n, :])


def apply_qt(vs, b):
    """Return ``Q^T b`` (reduced, length n) for reflectors from
    :func:`householder_reflectors`, without the sign normalization.

    ``b`` has shape ``(..., m)`` or ``(..., m, k)``.
    """
    vector = np.ndim(b) == vs.ndim - 1
    y = np.array(b, dtype=float)
    if vector:
        y = y[..., None]
    n = vs.shape[-1]
    for k in range(n):
        v = vs[..., k:, k]
        proj = v[..., None, :] @ y[..., k:, :]
        y[..., k:, :] -= 2.0 * v[..., :, None] * proj
    y = y[..., :n, :]
    return y[..., 0] if vector else y


def _diag_signs(r):
    d = np.diagonal(r, axis1=-2, axis2=-1)
    return np.where(d < 0.0, -1.0, 1.0)


def householder_qr(a):
    """Reduced QR factorization by Householder reflections.

    The diagonal of ``R`` is made nonnegative, which fixes the otherwise
    free column signs of ``Q``.

    Parameters
    ----------
    a : (..., m, n) array_like
        Matrix (or stack of matrices) with ``m >= n``.

    Returns
    -------
    q : (..., m, n) ndarray
        Orthonormal columns.
    r : (..., n, n) ndarray
        Upper triangular with exact zeros below the diagonal.

    Examples
    --------
    >>> q, r = householder_qr([[3.0], [4.0]])
    >>> r
    array([[5.]])
    """
    vs, r = householder_reflectors(a)
    *batch, m, n = vs.shape
    q = np.zeros(vs.shape)
    idx = np.arange(n)
    q[..., idx, idx] = 1.0
    for k in reversed(range(n)):
        v = vs[..., k:, k]
        proj = v[..., None, :] @ q[..., k:, :]
        q[..., k:, :] -= 2.0 * v[..., :, None] * proj
    sign = _diag_signs(r)
    return q * sign[..., None, :], r * sign[..., :, None]


def inv_upper(r):
    """Inverse of an upper triangular matrix by n back substitutions.

    Columns at or right of a zero pivot come out non-finite; the leading
    blocks left of the first zero pivot are unaffected.
    """
    r = np.asarray(r, dtype=float)
    n = r.shape[-1]
    x = np.zeros(r.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in reversed(range(n)):
            rhs = -(r[..., i:i + 1, i + 1:] @ x[..., i + 1:, i:])[..., 0, :]
            rhs[..., 0] += 1.0
            x[..., i, i:] = rhs / r[..., i, i, None]
    return x


def cond1_upper_triangular(r):
    """1-norm condition number ``||R||_1 ||R^-1||_1`` of upper triangular R.

    ``||R^-1||_1`` is computed exactly, which is cheap for the small
    systems used here. Returns ``inf`` when a diagonal entry is zero.
    """
    r = np.asarray(r, dtype=float)
    rinv = inv_upper(r)
    norm_r = np.abs(r).sum(axis=-2).max(axis=-1)
    with np.errstate(invalid="ignore"):
        norm_inv = np.abs(rinv).sum(axis=-2).max(axis=-1)
    singular = (np.diagonal(r, axis1=-2, axis2=-1) == 0.0).any(axis=-1)
    out = np.where(singular | ~np.isfinite(norm_inv), np.inf, norm_r * norm_inv)
    return out[()] if out.ndim == 0 else out


def solve_upper(r, y):
    """Back substitution for ``R x = y`` with R upper triangular.

    ``y`` may be ``(..., n)`` or ``(..., n, k)``.

    Raises
    ------
    SingularMatrixError
        If any diagonal entry of ``R`` is exactly zero.
    """
    r = np.asarray(r, dtype=float)
    if (np.diagonal(r, axis1=-2, axis2=-1) == 0.0).any():
        raise SingularMatrixError("zero pivot in triangular solve")
    vector = np.ndim(y) == r.ndim - 1
    x = np.array(y, dtype=float)
    if vector:
        x = x[..., None]
    n = r.shape[-1]
    for i in reversed(range(n)):
        x[..., i, :] -= (r[..., i:i + 1, i + 1:] @ x[..., i + 1:, :])[..., 0, :]
        x[..., i, :] /= r[..., i, i, None]
    return x[..., 0] if vector else x


def eig_sym2(m):
    """Closed-form eigendecomposition of symmetric 2x2 matrices.

    Parameters
    ----------
    m : (..., 2, 2) array_like
        Symmetric input; only ``m[0,0]``, ``m[0,1]`` and ``m[1,1]`` are read.

    Returns
    -------
    lam : (..., 2) ndarray
        Eigenvalues with ``lam[..., 0] >= lam[..., 1]``.
    x : (..., 2, 2) ndarray
        Rotation matrix whose columns are the matching eigenvectors.
    """
    m = np.asarray(m, dtype=float)
    # work on a unit-scale copy so products neither overflow nor underflow
    entries = np.stack([m[..., 0, 0], m[..., 0, 1], m[..., 1, 1]], axis=-1)
    scale = np.abs(entries).max(axis=-1)
    scale = np.where(scale > 0.0, scale, 1.0)
    a, b, d = np.moveaxis(entries / scale[..., None], -1, 0)
    half_tr = 0.5 * (a + d)
    half_diff = 0.5 * (a - d)
    rad = np.hypot(half_diff, b)
    # larger-magnitude eigenvalue first; the other one via the determinant
    big = half_tr + np.copysign(rad, half_tr)
    det = a * d - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big != 0.0, det / np.where(big != 0.0, big, 1.0), 0.0)
    lam1 = np.where(half_tr >= 0.0, big, small)
    lam2 = np.where(half_tr >= 0.0, small, big)
    # round-off can invert a near-tie; the order is known analytically
    lam1, lam2 = np.maximum(lam1, lam2), np.minimum(lam1, lam2)
    phi = 0.5 * np.arctan2(b, half_diff)
    c, s = np.cos(phi), np.sin(phi)
    x = np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)
    return np.stack([lam1, lam2], axis=-1) * scale[..., None], x


@dataclass(frozen=True)
class JacobianSVD:
    """Explicit SVD ``J = U diag(sigma) V^T`` of ``J = [I_2 | grad]^T``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    c: np.ndarray
    s: np.ndarray
    theta: np.ndarray
    ell: np.ndarray

    @property
    def cond(self):
        return self.sigma[..., 0] / self.sigma[..., 1]


def jacobian_svd(grad):
    """SVD of the height-function Jacobian from its gradient ``(f_u, f_v)``.

    The singular values are ``(ell, 1)`` with ``ell = sqrt(1 + |grad|^2)``.
    The rotation angle is defined as zero for a (numerically) zero gradient.
    """
    grad = np.asarray(grad, dtype=float)
    fu, fv = grad[..., 0], grad[..., 1]
    gnorm = np.hypot(fu, fv)
    flat = gnorm < GRAD_ZERO_TOL
    safe = np.where(flat, 1.0, gnorm)
    c = np.where(flat, 1.0, fu / safe)
    s = np.where(flat, 0.0, fv / safe)
    theta = np.where(flat, 0.0, np.arctan2(fv, fu))
    ell = np.sqrt(1.0 + gnorm * gnorm)
    zero = np.zeros_like(c)
    u = np.stack(
        [
            np.stack([c / ell, -s], axis=-1),
            np.stack([s / ell, c], axis=-1),
            np.stack([gnorm / ell, zero], axis=-1),
        ],
        axis=-2,
    )
    v = np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)
    sigma = np.stack([ell, np.ones_like(ell)], axis=-1)
    return JacobianSVD(U=u, sigma=sigma, V=v, c=c, s=s, theta=theta, ell=ell)
