"""Real spherical harmonics up to degree 3 (graphics sign convention).

Basis index is l*l + l + m for m in [-l, l]. Colours are offset by 0.5 on the
DC band and clamped at zero.
"""
from __future__ import annotations

import numba as nb
import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

MAX_DEGREE = 3


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def rgb_to_sh(rgb):
    return (np.asarray(rgb) - 0.5) / C0


def sh_to_rgb(dc):
    return np.asarray(dc) * C0 + 0.5


@nb.njit(cache=True)
def basis(x, y, z, degree, out):
    out[0] = C0
    if degree < 1:
        return
    out[1] = -C1 * y
    out[2] = C1 * z
    out[3] = -C1 * x
    if degree < 2:
        return
    xx, yy, zz = x * x, y * y, z * z
    out[4] = C2[0] * x * y
    out[5] = C2[1] * y * z
    out[6] = C2[2] * (2.0 * zz - xx - yy)
    out[7] = C2[3] * x * z
    out[8] = C2[4] * (xx - yy)
    if degree < 3:
        return
    out[9] = C3[0] * y * (3.0 * xx - yy)
    out[10] = C3[1] * x * y * z
    out[11] = C3[2] * y * (4.0 * zz - xx - yy)
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13] = C3[4] * x * (4.0 * zz - xx - yy)
    out[14] = C3[5] * z * (xx - yy)
    out[15] = C3[6] * x * (xx - 3.0 * yy)


@nb.njit(cache=True)
def basis_grad(x, y, z, degree, out):
    """d basis_k / d(x, y, z) for the unnormalised direction components, shape (K, 3)."""
    for k in range(out.shape[0]):
        out[k, 0] = 0.0
        out[k, 1] = 0.0
        out[k, 2] = 0.0
    if degree < 1:
        return
    out[1, 1] = -C1
    out[2, 2] = C1
    out[3, 0] = -C1
    if degree < 2:
        return
    xx, yy, zz = x * x, y * y, z * z
    out[4, 0] = C2[0] * y
    out[4, 1] = C2[0] * x
    out[5, 1] = C2[1] * z
    out[5, 2] = C2[1] * y
    out[6, 0] = -2.0 * C2[2] * x
    out[6, 1] = -2.0 * C2[2] * y
    out[6, 2] = 4.0 * C2[2] * z
    out[7, 0] = C2[3] * z
    out[7, 2] = C2[3] * x
    out[8, 0] = 2.0 * C2[4] * x
    out[8, 1] = -2.0 * C2[4] * y
    if degree < 3:
        return
    out[9, 0] = C3[0] * 6.0 * x * y
    out[9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
    out[10, 0] = C3[1] * y * z
    out[10, 1] = C3[1] * x * z
    out[10, 2] = C3[1] * x * y
    out[11, 0] = C3[2] * (-2.0 * x * y)
    out[11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
    out[11, 2] = C3[2] * 8.0 * y * z
    out[12, 0] = C3[3] * (-6.0 * x * z)
    out[12, 1] = C3[3] * (-6.0 * y * z)
    out[12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
    out[13, 1] = C3[4] * (-2.0 * x * y)
    out[13, 2] = C3[4] * 8.0 * x * z
    out[14, 0] = C3[5] * 2.0 * x * z
    out[14, 1] = C3[5] * (-2.0 * y * z)
    out[14, 2] = C3[5] * (xx - yy)
    out[15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
    out[15, 1] = C3[6] * (-6.0 * x * y)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values for unit directions (..., 3) -> (..., (degree+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    flat = dirs.reshape(-1, 3)
    out = np.zeros((flat.shape[0], num_coeffs(degree)))
    for i in range(flat.shape[0]):
        basis(flat[i, 0], flat[i, 1], flat[i, 2], degree, out[i])
    return out.reshape(dirs.shape[:-1] + (out.shape[-1],))


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray, degree: int | None = None) -> np.ndarray:
    """Per-vertex RGB from a per-vertex coefficient block.

    coeffs: (3, K, 3) vertices x basis x rgb; view_dir: unit (3,) shared by the
    vertices, or (3, 3) one direction per vertex.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    K = coeffs.shape[-2]
    if degree is None:
        degree = int(round(np.sqrt(K))) - 1
    use = num_coeffs(degree)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if view_dir.ndim == 1:
        view_dir = np.broadcast_to(view_dir, (coeffs.shape[0], 3))
    Y = sh_basis(view_dir, degree)
    raw = np.einsum("vk,vkc->vc", Y, coeffs[:, :use]) + 0.5
    return np.maximum(raw, 0.0)
