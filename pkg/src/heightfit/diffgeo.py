"""Surface quantities from the gradient and Hessian of a height function.

All functions broadcast over leading axes: ``grad`` is ``(..., 2)``,
``hess`` is ``(..., 2, 2)`` and frames are ``(..., 3, 3)`` with columns
``[t1 | t2 | m]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import eig_sym2, jacobian_svd

__all__ = [
    "FrameDegenerateError",
    "GradHess",
    "FundamentalMatrices",
    "ShapeOperator2",
    "jacobian",
    "pseudo_inverse_jacobian",
    "fundamental_matrices",
    "normal_from_gradient",
    "symmetric_shape_operator",
    "principal",
    "curvature_tensor",
    "mean_gaussian",
    "transfer_frame",
    "classical_weingarten",
    "umbilic_mask",
]

# minimum w-component of the normal for a frame to see the surface as a graph
GAMMA_MIN = 1e-10
UMBILIC_RTOL = 1e-9


class FrameDegenerateError(ValueError):
    """The target frame does not see the surface as a height function."""


@dataclass(frozen=True)
class GradHess:
    grad: np.ndarray
    hess: np.ndarray


@dataclass(frozen=True)
class FundamentalMatrices:
    G: np.ndarray
    B: np.ndarray
    g: np.ndarray
    ell: np.ndarray


@dataclass(frozen=True)
class ShapeOperator2:
    """Symmetric shape operator ``W`` in the orthonormal tangent basis ``U``."""

    W: np.ndarray
    U: np.ndarray


def _sym(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _as_hess(hess):
    h = np.array(hess, dtype=float)
    off = h[..., 0, 1].copy()
    h[..., 1, 0] = off
    return h


def jacobian(grad):
    """``J = [I_2 | grad]^T``, shape ``(..., 3, 2)``."""
    grad = np.asarray(grad, dtype=float)
    j = np.zeros(grad.shape[:-1] + (3, 2))
    j[..., 0, 0] = 1.0
    j[..., 1, 1] = 1.0
    j[..., 2, :] = grad
    return j


def pseudo_inverse_jacobian(grad):
    """Closed-form ``J^+ = (J^T J)^{-1} J^T``, shape ``(..., 2, 3)``."""
    grad = np.asarray(grad, dtype=float)
    fu, fv = grad[..., 0], grad[..., 1]
    ell2 = 1.0 + fu * fu + fv * fv
    jp = np.empty(grad.shape[:-1] + (2, 3))
    jp[..., 0, 0] = 1.0 + fv * fv
    jp[..., 0, 1] = -fu * fv
    jp[..., 0, 2] = fu
    jp[..., 1, 0] = -fu * fv
    jp[..., 1, 1] = 1.0 + fu * fu
    jp[..., 1, 2] = fv
    return jp / ell2[..., None, None]


def fundamental_matrices(grad, hess):
    grad = np.asarray(grad, dtype=float)
    j = jacobian(grad)
    G = np.swapaxes(j, -1, -2) @ j
    g = 1.0 + (grad * grad).sum(axis=-1)
    ell = np.sqrt(g)
    return FundamentalMatrices(G=G, B=_as_hess(hess) / ell[..., None, None], g=g, ell=ell)


def normal_from_gradient(grad, frame=None):
    """Unit normal ``(-f_u, -f_v, 1) / ell`` in local and global coordinates.

    Returns
    -------
    n_local, n_global : (..., 3) ndarray
        ``n_global`` equals ``n_local`` when no frame is given.
    """
    grad = np.asarray(grad, dtype=float)
    ell = np.sqrt(1.0 + (grad * grad).sum(axis=-1))
    n = np.concatenate([-grad, np.ones(grad.shape[:-1] + (1,))], axis=-1) / ell[..., None]
    if frame is None:
        return n, n.copy()
    return n, (np.asarray(frame, dtype=float) @ n[..., None])[..., 0]


def symmetric_shape_operator(grad, hess):
    """Shape operator in the left-singular-vector basis of the Jacobian.

    ``W = (1/ell) P H P^T`` with ``P = [[c/ell, s/ell], [-s, c]]``; the
    result is symmetrized by averaging its off-diagonal pair.
    """
    svd = jacobian_svd(grad)
    c, s, ell = svd.c, svd.s, svd.ell
    p = np.empty(c.shape + (2, 2))
    p[..., 0, 0] = c / ell
    p[..., 0, 1] = s / ell
    p[..., 1, 0] = -s
    p[..., 1, 1] = c
    w = p @ _as_hess(hess) @ np.swapaxes(p, -1, -2) / ell[..., None, None]
    return ShapeOperator2(W=_sym(w), U=svd.U)


def _orient(vec):
    # make the largest-magnitude component positive
    k = np.argmax(np.abs(vec), axis=-1)
    lead = np.take_along_axis(vec, k[..., None], axis=-1)
    return np.where(lead < 0.0, -vec, vec)


def principal(shape):
    """Principal curvatures (signed, ``k1 >= k2``) and directions.

    Returns
    -------
    kappa : (..., 2) ndarray
    dir1, dir2 : (..., 3) ndarray
        Orthonormal tangent directions in the coordinates of ``shape.U``.
    """
    lam, x = eig_sym2(shape.W)
    dirs = shape.U @ x
    return lam, _orient(dirs[..., 0]), _orient(dirs[..., 1])


def umbilic_mask(kappa):
    """True where principal directions are not reliably defined."""
    k1, k2 = kappa[..., 0], kappa[..., 1]
    return np.abs(k1 - k2) < UMBILIC_RTOL * np.maximum(np.abs(k1), 1.0)


def curvature_tensor(grad, hess, frame=None):
    """Curvature tensor ``C = J+^T H J+ / ell`` and its global version.

    Returns
    -------
    C, C_g : (..., 3, 3) ndarray
        ``C_g = Q C Q^T``; equal to ``C`` when ``frame`` is None.
    """
    grad = np.asarray(grad, dtype=float)
    ell = np.sqrt(1.0 + (grad * grad).sum(axis=-1))
    jp = pseudo_inverse_jacobian(grad)
    c = _sym(np.swapaxes(jp, -1, -2) @ _as_hess(hess) @ jp / ell[..., None, None])
    if frame is None:
        return c, c.copy()
    q = np.asarray(frame, dtype=float)
    return c, _sym(q @ c @ np.swapaxes(q, -1, -2))


def mean_gaussian(grad, hess):
    """Mean and Gaussian curvature directly from ``grad`` and ``hess``."""
    grad = np.asarray(grad, dtype=float)
    h = _as_hess(hess)
    g2 = (grad * grad).sum(axis=-1)
    ell2 = 1.0 + g2
    ell = np.sqrt(ell2)
    tr = h[..., 0, 0] + h[..., 1, 1]
    ghg = (grad[..., None, :] @ h @ grad[..., :, None])[..., 0, 0]
    kh = tr / (2.0 * ell) - ghg / (2.0 * ell * ell2)
    det = h[..., 0, 0] * h[..., 1, 1] - h[..., 0, 1] * h[..., 0, 1]
    kg = det / (ell2 * ell2)
    return kh, kg


def transfer_frame(grad, hess, q_from, q_to):
    """Express gradient and Hessian of the same surface point in another frame.

    Both frames are orthogonal matrices with axes as columns, in a shared
    global coordinate system; positions do not matter, only orientation.

    Raises
    ------
    FrameDegenerateError
        If the normal is (nearly) orthogonal to or opposite the target
        frame's third axis.
    """
    q_from = np.asarray(q_from, dtype=float)
    q_to = np.asarray(q_to, dtype=float)
    rot = np.swapaxes(q_to, -1, -2) @ q_from
    n, _ = normal_from_gradient(grad)
    c, _ = curvature_tensor(grad, hess)
    n_to = (rot @ n[..., None])[..., 0]
    c_to = rot @ c @ np.swapaxes(rot, -1, -2)
    gamma = n_to[..., 2]
    if np.any(gamma <= GAMMA_MIN):
        raise FrameDegenerateError(
            f"target frame w-axis is not on the normal side (gamma={np.min(gamma):.3g})"
        )
    new_grad = -n_to[..., :2] / gamma[..., None]
    j = jacobian(new_grad)
    new_hess = np.swapaxes(j, -1, -2) @ c_to @ j / gamma[..., None, None]
    return GradHess(grad=new_grad, hess=_sym(new_hess))


def classical_weingarten(grad, hess):
    """Nonsymmetric Weingarten matrix ``G^-1 H / ell`` (reference only)."""
    fm = fundamental_matrices(grad, hess)
    return np.linalg.solve(fm.G, fm.B)
