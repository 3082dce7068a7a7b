"""Real spherical harmonics basis (hard-coded polynomials, lmax <= 4) and
view-dependent decoding of RGB / feature coefficients.

Basis order is band-major: l ascending, m from -l to +l, index l(l+1)+m.
Sign and normalization convention is the orthonormal real basis with
Condon-Shortley phase on the |m| > 0 terms, the one splatting scene files
in the wild use; the polynomials are written out in docs/math_notes.md.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIR_NORM_TOL = 1e-6
MAX_LMAX = 4

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)
C4 = (2.5033429417967046, -1.7701307697799304, 0.9461746957575601,
      -0.6690465435572892, 0.10578554691520431, -0.6690465435572892,
      0.47308734787878004, -1.7701307697799304, 0.6258357354491761)


@dataclass(frozen=True)
class SHBasis:
    lmax: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[-1] != (self.lmax + 1) ** 2:
            raise ValueError("basis length must be (lmax+1)^2")


def lmax_for_coeffs(k: int) -> int:
    """Band count from a coefficient count; k must be a perfect square <= 25."""
    lmax = int(round(np.sqrt(k))) - 1
    if (lmax + 1) ** 2 != k or not (0 <= lmax <= MAX_LMAX):
        raise ValueError(f"coefficient count {k} is not (lmax+1)^2 for lmax <= {MAX_LMAX}")
    return lmax


def _check_dirs(dirs: np.ndarray) -> np.ndarray:
    dirs = np.asarray(dirs, dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=-1)
    if np.any(np.abs(norms - 1.0) > DIR_NORM_TOL):
        raise ValueError("direction must be a unit vector")
    return dirs


def sh_basis_unchecked(dirs: np.ndarray, lmax: int) -> np.ndarray:
    """Basis values for unit directions (..., 3) -> (..., (lmax+1)^2)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + ((lmax + 1) ** 2,), dtype=np.float64)
    out[..., 0] = C0
    if lmax >= 1:
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if lmax >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = C2[0] * xy
        out[..., 5] = C2[1] * yz
        out[..., 6] = C2[2] * (2 * zz - xx - yy)
        out[..., 7] = C2[3] * xz
        out[..., 8] = C2[4] * (xx - yy)
    if lmax >= 3:
        out[..., 9] = C3[0] * y * (3 * xx - yy)
        out[..., 10] = C3[1] * xy * z
        out[..., 11] = C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = C3[5] * z * (xx - yy)
        out[..., 15] = C3[6] * x * (xx - 3 * yy)
    if lmax >= 4:
        out[..., 16] = C4[0] * xy * (xx - yy)
        out[..., 17] = C4[1] * yz * (3 * xx - yy)
        out[..., 18] = C4[2] * xy * (7 * zz - 1)
        out[..., 19] = C4[3] * yz * (7 * zz - 3)
        out[..., 20] = C4[4] * (zz * (35 * zz - 30) + 3)
        out[..., 21] = C4[5] * xz * (7 * zz - 3)
        out[..., 22] = C4[6] * (xx - yy) * (7 * zz - 1)
        out[..., 23] = C4[7] * xz * (xx - 3 * yy)
        out[..., 24] = C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy))
    return out


def sh_basis(dirs: np.ndarray, lmax: int) -> SHBasis:
    """Real SH basis at unit direction(s), band-major order."""
    if not (0 <= lmax <= MAX_LMAX):
        raise ValueError(f"unsupported degree {lmax} (supported 0..{MAX_LMAX})")
    dirs = _check_dirs(dirs)
    return SHBasis(lmax=lmax, values=sh_basis_unchecked(dirs, lmax))


def sh_basis_grad(dirs: np.ndarray, lmax: int) -> np.ndarray:
    """Partial derivatives of the basis polynomials w.r.t. (x, y, z).

    Returns (..., (lmax+1)^2, 3). These are free-variable derivatives of the
    polynomials evaluated at the unit vector; chain them through the
    normalization Jacobian (I - n n^T)/|v| to differentiate w.r.t. an
    unnormalized direction (any radial component is annihilated there, so
    the on-sphere polynomial representative does not matter).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    k = (lmax + 1) ** 2
    g = np.zeros(dirs.shape[:-1] + (k, 3), dtype=np.float64)
    if lmax >= 1:
        g[..., 1, 1] = -C1
        g[..., 2, 2] = C1
        g[..., 3, 0] = -C1
    if lmax >= 2:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 4, 0] = C2[0] * y
        g[..., 4, 1] = C2[0] * x
        g[..., 5, 1] = C2[1] * z
        g[..., 5, 2] = C2[1] * y
        g[..., 6, 0] = C2[2] * (-2 * x)
        g[..., 6, 1] = C2[2] * (-2 * y)
        g[..., 6, 2] = C2[2] * (4 * z)
        g[..., 7, 0] = C2[3] * z
        g[..., 7, 2] = C2[3] * x
        g[..., 8, 0] = C2[4] * (2 * x)
        g[..., 8, 1] = C2[4] * (-2 * y)
    if lmax >= 3:
        g[..., 9, 0] = C3[0] * 6 * x * y
        g[..., 9, 1] = C3[0] * (3 * xx - 3 * yy)
        g[..., 10, 0] = C3[1] * y * z
        g[..., 10, 1] = C3[1] * x * z
        g[..., 10, 2] = C3[1] * x * y
        g[..., 11, 0] = C3[2] * (-2 * x * y)
        g[..., 11, 1] = C3[2] * (4 * zz - xx - 3 * yy)
        g[..., 11, 2] = C3[2] * (8 * y * z)
        g[..., 12, 0] = C3[3] * (-6 * x * z)
        g[..., 12, 1] = C3[3] * (-6 * y * z)
        g[..., 12, 2] = C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[..., 13, 0] = C3[4] * (4 * zz - 3 * xx - yy)
        g[..., 13, 1] = C3[4] * (-2 * x * y)
        g[..., 13, 2] = C3[4] * (8 * x * z)
        g[..., 14, 0] = C3[5] * (2 * x * z)
        g[..., 14, 1] = C3[5] * (-2 * y * z)
        g[..., 14, 2] = C3[5] * (xx - yy)
        g[..., 15, 0] = C3[6] * (3 * xx - 3 * yy)
        g[..., 15, 1] = C3[6] * (-6 * x * y)
    if lmax >= 4:
        g[..., 16, 0] = C4[0] * y * (3 * xx - yy)
        g[..., 16, 1] = C4[0] * x * (xx - 3 * yy)
        g[..., 17, 0] = C4[1] * 6 * x * y * z
        g[..., 17, 1] = C4[1] * z * (3 * xx - 3 * yy)
        g[..., 17, 2] = C4[1] * y * (3 * xx - yy)
        g[..., 18, 0] = C4[2] * y * (7 * zz - 1)
        g[..., 18, 1] = C4[2] * x * (7 * zz - 1)
        g[..., 18, 2] = C4[2] * 14 * x * y * z
        g[..., 19, 1] = C4[3] * z * (7 * zz - 3)
        g[..., 19, 2] = C4[3] * y * (21 * zz - 3)
        g[..., 20, 2] = C4[4] * (140 * zz * z - 60 * z)
        g[..., 21, 0] = C4[5] * z * (7 * zz - 3)
        g[..., 21, 2] = C4[5] * x * (21 * zz - 3)
        g[..., 22, 0] = C4[6] * 2 * x * (7 * zz - 1)
        g[..., 22, 1] = C4[6] * (-2 * y) * (7 * zz - 1)
        g[..., 22, 2] = C4[6] * 14 * z * (xx - yy)
        g[..., 23, 0] = C4[7] * z * (3 * xx - 3 * yy)
        g[..., 23, 1] = C4[7] * (-6 * x * y * z)
        g[..., 23, 2] = C4[7] * x * (xx - 3 * yy)
        g[..., 24, 0] = C4[8] * (4 * x * xx - 12 * x * yy)
        g[..., 24, 1] = C4[8] * (-12 * xx * y + 4 * y * yy)
    return g


def sh_eval_color(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """View-dependent color: coeffs (..., 3, K) dot basis, +0.5 offset,
    clamped below at 0 (the splat-file interchange convention)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    lmax = lmax_for_coeffs(coeffs.shape[-1])
    basis = sh_basis(dirs, lmax).values
    raw = np.einsum("...ck,...k->...c", coeffs, basis) + 0.5
    return np.maximum(raw, 0.0)


def sh_eval_features(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """View-dependent features: plain coeffs (..., D, K) dot basis, unconstrained."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    lmax = lmax_for_coeffs(coeffs.shape[-1])
    basis = sh_basis(dirs, lmax).values
    return np.einsum("...dk,...k->...d", coeffs, basis)
