"""Analytic backward pass through rasterization, SH decoding, covariance
construction, activation and reparameterized sampling, plus a central
finite-difference verification harness.

The backward recomputes per-pixel compositing per tile from the saved sort
order instead of storing per-pixel per-splat intermediates. Gradients flow
to the raw (pre-activation) parameters; the sampled feature gradient dL/dh
is additionally mapped through the reparameterization h = mu + eps * sigma
to dL/dmu = dL/dh and dL/dsigma = dL/dh * eps.

The rendered depth channel is diagnostic and outside the differentiable
surface: upstream gradients cover rgb, features and accumulated opacity.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import (Camera, GaussianParamsRaw, SemanticGaussians,
                    activate_params, quat_to_rotmat)
from .raster import (DEFAULT_CONFIG, SMOOTH_CONFIG, ForwardState, RasterConfig,
                     composite_weights, rasterize, _tile_pixels)
from .rng import RngStream
from .sh import lmax_for_coeffs, sh_basis_grad
from .variational import sample_semantic


@dataclass(eq=False)
class GradientSet:
    """Gradients w.r.t. raw parameters, plus the sampled-coefficient gradient
    ``feat`` (dL/dh) and its reparameterization images on mu / sigma."""

    position_raw: np.ndarray
    scale_raw: np.ndarray
    rotation_raw: np.ndarray
    opacity_raw: np.ndarray
    sh_rgb: np.ndarray
    sh_feat_mu: np.ndarray
    sh_feat_log_sigma: np.ndarray
    feat: np.ndarray
    sh_feat_sigma: np.ndarray

    RAW_FIELDS = GaussianParamsRaw.FIELDS

    @classmethod
    def zeros_like_scene(cls, sg: SemanticGaussians) -> "GradientSet":
        n, d, kf = sg.feat.shape
        return cls(
            position_raw=np.zeros((n, 3)),
            scale_raw=np.zeros((n, 3)),
            rotation_raw=np.zeros((n, 4)),
            opacity_raw=np.zeros(n),
            sh_rgb=np.zeros_like(sg.sh_rgb),
            sh_feat_mu=np.zeros((n, d, kf)),
            sh_feat_log_sigma=np.zeros((n, d, kf)),
            feat=np.zeros((n, d, kf)),
            sh_feat_sigma=np.zeros((n, d, kf)),
        )


def _rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(unit quaternion) as (..., 4, 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    j = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    j[..., 0, 0, :] = np.stack([zero, -z, y], axis=-1)
    j[..., 0, 1, :] = np.stack([z, zero, -x], axis=-1)
    j[..., 0, 2, :] = np.stack([-y, x, zero], axis=-1)
    j[..., 1, 0, :] = np.stack([zero, y, z], axis=-1)
    j[..., 1, 1, :] = np.stack([y, -2 * x, -w], axis=-1)
    j[..., 1, 2, :] = np.stack([z, w, -2 * x], axis=-1)
    j[..., 2, 0, :] = np.stack([-2 * y, x, w], axis=-1)
    j[..., 2, 1, :] = np.stack([x, zero, z], axis=-1)
    j[..., 2, 2, :] = np.stack([-w, z, -2 * y], axis=-1)
    j[..., 3, 0, :] = np.stack([-2 * z, -w, x], axis=-1)
    j[..., 3, 1, :] = np.stack([w, -2 * z, y], axis=-1)
    j[..., 3, 2, :] = np.stack([x, y, zero], axis=-1)
    return 2.0 * j


def _tile_backward(state: ForwardState, tile, grad_rgb, grad_features, grad_alpha):
    """Recompute one tile's compositing and return per-splat partials."""
    y0, y1, x0, x1, sub = tile
    if sub.size == 0:
        return None
    config = state.config
    proj = state.proj
    values = state.values
    px, py = _tile_pixels(y0, y1, x0, x1)
    w, aux = composite_weights(px, py, proj, sub, config)

    gr = grad_rgb[y0:y1, x0:x1].reshape(-1, 3)
    gf = grad_features[y0:y1, x0:x1].reshape(-1, grad_features.shape[2])
    ga = grad_alpha[y0:y1, x0:x1].reshape(-1)

    # u[p, k]: upstream weight of splat k's unit contribution at pixel p
    u = gr @ values.rgb[sub].T + gf @ values.feat[sub].T + ga[:, None]
    contrib = w * u
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib

    alpha_eff = aux["alpha_eff"]
    d_alpha_eff = np.where(aux["include"],
                           aux["t_before"] * u - suffix / (1.0 - alpha_eff), 0.0)
    live = aux["mask"] & (aux["alpha_raw"] < config.alpha_ceiling)
    gar = np.where(live, d_alpha_eff, 0.0)  # dL/d(alpha before masks/ceiling)

    g = aux["g"]
    gq = -0.5 * gar * aux["alpha_raw"]  # dL/d(Mahalanobis form)
    dx, dy = aux["dx"], aux["dy"]
    con = proj.conic[sub]

    d_values_rgb = w.T @ gr
    d_values_feat = w.T @ gf
    d_opacity = np.einsum("pk,pk->k", gar, g)
    d_conic = np.stack([
        np.einsum("pk,pk->k", gq, dx * dx),
        np.einsum("pk,pk->k", gq, 2.0 * dx * dy),
        np.einsum("pk,pk->k", gq, dy * dy),
    ], axis=1)
    d_mean = np.stack([
        -2.0 * np.einsum("pk,pk->k", gq, con[:, 0] * dx + con[:, 1] * dy),
        -2.0 * np.einsum("pk,pk->k", gq, con[:, 1] * dx + con[:, 2] * dy),
    ], axis=1)
    return sub, d_values_rgb, d_values_feat, d_opacity, d_conic, d_mean


def rasterize_backward(sg: SemanticGaussians, cam: Camera,
                       state: Optional[ForwardState],
                       grad_rgb=None, grad_features=None, grad_alpha=None,
                       threads: int = 1) -> GradientSet:
    """Chain per-pixel upstream gradients back to raw scene parameters.

    ``state`` must come from rasterize(..., return_state=True) on the same
    scene and camera. The scene must carry raw provenance (it was produced
    by sample_semantic on an activate_params output), otherwise the
    activation Jacobians are unavailable.
    """
    if state is None:
        raise ValueError("missing saved forward state (render with return_state=True)")
    if sg.source is None or sg.source.raw is None or sg.source.scale_range is None:
        raise ValueError("scene lacks raw parameter provenance; build it via "
                         "activate_params + sample_semantic")
    if sg.eps is None:
        raise ValueError("scene lacks the sampling noise record (eps)")

    h, w_img, d = state.height, state.width, sg.feat.shape[1]
    grad_rgb = np.zeros((h, w_img, 3)) if grad_rgb is None else np.asarray(grad_rgb, dtype=np.float64)
    grad_features = np.zeros((h, w_img, d)) if grad_features is None else np.asarray(grad_features, dtype=np.float64)
    grad_alpha = np.zeros((h, w_img)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64)
    if grad_alpha.ndim == 3:
        grad_alpha = grad_alpha[:, :, 0]

    proj = state.proj
    values = state.values
    m = proj.indices.size
    out = GradientSet.zeros_like_scene(sg)
    if m == 0:
        return out

    # -- per-tile accumulation (deterministic: reduced in tile order) --------
    d_values_rgb = np.zeros((m, 3))
    d_values_feat = np.zeros((m, d))
    d_opacity = np.zeros(m)
    d_conic = np.zeros((m, 3))
    d_mean = np.zeros((m, 2))

    def reduce_partial(partial):
        if partial is None:
            return
        sub, pvr, pvf, po, pc, pm = partial
        np.add.at(d_values_rgb, sub, pvr)
        np.add.at(d_values_feat, sub, pvf)
        np.add.at(d_opacity, sub, po)
        np.add.at(d_conic, sub, pc)
        np.add.at(d_mean, sub, pm)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(
                lambda t: _tile_backward(state, t, grad_rgb, grad_features, grad_alpha),
                state.tiles))
        for partial in partials:
            reduce_partial(partial)
    else:
        for tile in state.tiles:
            reduce_partial(_tile_backward(state, tile, grad_rgb, grad_features, grad_alpha))

    # -- conic -> 2D covariance (inverse rule, symmetric packing) ------------
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    q_mat = np.empty((m, 2, 2))
    q_mat[:, 0, 0], q_mat[:, 0, 1] = a, b
    q_mat[:, 1, 0], q_mat[:, 1, 1] = b, c
    g2 = np.empty((m, 2, 2))
    g2[:, 0, 0] = d_conic[:, 0]
    g2[:, 0, 1] = g2[:, 1, 0] = 0.5 * d_conic[:, 1]
    g2[:, 1, 1] = d_conic[:, 2]
    d_sigma2d = -q_mat @ g2 @ q_mat

    # -- 2D covariance -> 3D covariance, projection Jacobian, camera mean ----
    jw = proj.jw
    cov3d = proj.cov3d
    d_a_mat = 2.0 * d_sigma2d @ jw @ cov3d
    d_cov3d = np.swapaxes(jw, 1, 2) @ d_sigma2d @ jw
    w_mat = cam.rotation_matrix
    d_jac = d_a_mat @ w_mat.T

    t = proj.t_cam
    zi = t[:, 2]
    fx, fy = cam.fx, cam.fy
    d_t = np.zeros((m, 3))
    d_t[:, 0] = d_jac[:, 0, 2] * (-fx / zi**2)
    d_t[:, 1] = d_jac[:, 1, 2] * (-fy / zi**2)
    d_t[:, 2] = (d_jac[:, 0, 0] * (-fx / zi**2)
                 + d_jac[:, 0, 2] * (2 * fx * t[:, 0] / zi**3)
                 + d_jac[:, 1, 1] * (-fy / zi**2)
                 + d_jac[:, 1, 2] * (2 * fy * t[:, 1] / zi**3))
    # screen mean chain: d(mean2d)/d(t_cam) is exactly the projection Jacobian
    jac = np.zeros((m, 2, 3))
    jac[:, 0, 0] = fx / zi
    jac[:, 0, 2] = -fx * t[:, 0] / zi**2
    jac[:, 1, 1] = fy / zi
    jac[:, 1, 2] = -fy * t[:, 1] / zi**2
    d_t += np.einsum("mij,mi->mj", jac, d_mean)
    d_position = d_t @ w_mat  # W^T @ d_t, row form

    # -- SH coefficient and view-direction gradients --------------------------
    rgb_live = (values.rgb_pre > 0).astype(np.float64)
    d_rgb_eff = d_values_rgb * rgb_live
    src = sg.source
    idx = proj.indices
    sh_rgb_sel = sg.sh_rgb[idx]
    feat_sel = sg.feat[idx]
    d_sh_rgb = np.einsum("mc,mk->mck", d_rgb_eff, values.basis_rgb)
    d_feat = np.einsum("md,mk->mdk", d_values_feat, values.basis_feat)

    lmax_rgb = lmax_for_coeffs(sg.sh_rgb.shape[2])
    lmax_feat = lmax_for_coeffs(sg.feat.shape[2])
    db_rgb = sh_basis_grad(values.view_dir, lmax_rgb)
    db_feat = sh_basis_grad(values.view_dir, lmax_feat)
    poly_grad = (np.einsum("mc,mck,mkj->mj", d_rgb_eff, sh_rgb_sel, db_rgb)
                 + np.einsum("md,mdk,mkj->mj", d_values_feat, feat_sel, db_feat))
    n_dir = values.view_dir
    radial = np.einsum("mj,mj->m", poly_grad, n_dir)
    d_position += (poly_grad - radial[:, None] * n_dir) / values.view_dist[:, None]

    # -- 3D covariance -> scale / rotation ------------------------------------
    rot_sel = sg.rotation[idx]
    rotmat = quat_to_rotmat(rot_sel)
    s_sel = sg.scale[idx]
    d_rotmat = 2.0 * (d_cov3d @ rotmat) * (s_sel**2)[:, None, :]
    inner = np.swapaxes(rotmat, 1, 2) @ d_cov3d @ rotmat
    d_scale = 2.0 * s_sel * np.einsum("mkk->mk", inner)

    dr_dq = _rotmat_quat_jacobian(rot_sel)
    d_q_unit = np.einsum("mab,miab->mi", d_rotmat, dr_dq)
    q_raw = src.raw.rotation_raw[idx]
    q_norm = np.linalg.norm(q_raw, axis=1)
    radial_q = np.einsum("mi,mi->m", d_q_unit, rot_sel)
    d_q_raw = (d_q_unit - radial_q[:, None] * rot_sel) / q_norm[:, None]

    # -- activation Jacobians --------------------------------------------------
    s_min, s_max = src.scale_range
    sig = (s_sel - s_min) / (s_max - s_min)
    d_scale_raw = d_scale * (s_max - s_min) * sig * (1.0 - sig)
    o_sel = sg.opacity[idx]
    d_opacity_raw = d_opacity * o_sel * (1.0 - o_sel)

    # -- scatter back to (N, ...) arrays --------------------------------------
    out.position_raw[idx] = d_position
    out.scale_raw[idx] = d_scale_raw
    out.rotation_raw[idx] = d_q_raw
    out.opacity_raw[idx] = d_opacity_raw
    out.sh_rgb[idx] = d_sh_rgb
    out.feat[idx] = d_feat
    out.sh_feat_mu[idx] = d_feat
    eps_sel = sg.eps[idx]
    sigma_sel = src.feat_sigma[idx]
    out.sh_feat_sigma[idx] = d_feat * eps_sel
    out.sh_feat_log_sigma[idx] = d_feat * eps_sel * sigma_sel
    return out


# ---------------------------------------------------------------------------
# finite-difference verification harness
# ---------------------------------------------------------------------------

REL_TOL_SOFT = 1e-3  # >= 99% of coordinates must be below this
REL_TOL_HARD = 1e-2  # no coordinate may exceed this
SOFT_FRACTION = 0.99


@dataclass
class CoordinateRecord:
    fieldname: str
    gaussian: int
    coord: int
    analytic: float
    fd: float
    rel_error: float

    def to_dict(self):
        return dict(field=self.fieldname, gaussian=self.gaussian, coord=self.coord,
                    analytic=self.analytic, fd=self.fd, rel_error=self.rel_error)


@dataclass
class GradCheckReport:
    passed: bool
    n_coordinates: int
    n_excluded: int
    frac_within_soft: float
    max_rel_error: float
    mean_rel_error: float
    worst: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    excluded_gaussians: list = field(default_factory=list)
    seed: int = 0
    step: float = 0.0

    def to_dict(self):
        return dict(
            passed=bool(self.passed),
            n_coordinates=self.n_coordinates,
            n_excluded=self.n_excluded,
            frac_within_soft=self.frac_within_soft,
            max_rel_error=self.max_rel_error,
            mean_rel_error=self.mean_rel_error,
            worst=[r.to_dict() for r in self.worst],
            failures=[r.to_dict() for r in self.failures],
            excluded_gaussians=self.excluded_gaussians,
            seed=self.seed,
            step=self.step,
        )


def render_scalar_loss(raw: GaussianParamsRaw, scale_range, cam: Camera,
                       rng: RngStream, config: RasterConfig) -> float:
    """Sum of all rgb/feature/alpha output samples for the activated, sampled
    scene; the scalar probed by finite differences."""
    sg = sample_semantic(activate_params(raw, scale_range), rng)
    out = rasterize(sg, cam, config)
    return float(out.rgb.data.sum() + out.features.data.sum() + out.alpha.data.sum())


def gradcheck(raw: GaussianParamsRaw, scale_range, cam: Camera, seed: int,
              step: float = 1e-3, config: RasterConfig = SMOOTH_CONFIG,
              backward_fn: Optional[Callable] = None,
              time_budget: Optional[float] = None) -> GradCheckReport:
    """Compare the analytic gradient of render_scalar_loss against central
    finite differences, coordinate by coordinate.

    Coordinates of fully culled Gaussians carry no signal and are excluded
    (reported in ``excluded_gaussians``). ``backward_fn`` substitutes the
    analytic backward (used by the harness self-test).
    """
    rng = RngStream(seed, 0)
    g = activate_params(raw, scale_range)
    sg = sample_semantic(g, rng)
    out, state = rasterize(sg, cam, config, return_state=True)
    ones_rgb = np.ones_like(out.rgb.data)
    ones_feat = np.ones_like(out.features.data)
    ones_alpha = np.ones((cam.height, cam.width))
    backward = backward_fn or rasterize_backward
    grads = backward(sg, cam, state, grad_rgb=ones_rgb, grad_features=ones_feat,
                     grad_alpha=ones_alpha)

    culled = np.flatnonzero(~state.proj.valid_mask)
    culled_set = set(int(i) for i in culled)

    records = []
    n_excluded = 0
    start = time.monotonic()
    for fieldname in GaussianParamsRaw.FIELDS:
        base = getattr(raw, fieldname)
        analytic = getattr(grads, fieldname)
        flat_per_gaussian = int(np.prod(base.shape[1:], dtype=int)) if base.ndim > 1 else 1
        for gauss in range(raw.count):
            if gauss in culled_set:
                n_excluded += flat_per_gaussian
                continue
            for coord in range(flat_per_gaussian):
                if time_budget is not None and time.monotonic() - start > time_budget:
                    raise TimeoutError("gradcheck exceeded its time budget")
                probe = raw.copy()
                arr = getattr(probe, fieldname)
                flat = arr.reshape(raw.count, -1)
                flat[gauss, coord] += step
                loss_plus = render_scalar_loss(probe, scale_range, cam, rng, config)
                flat[gauss, coord] -= 2 * step
                loss_minus = render_scalar_loss(probe, scale_range, cam, rng, config)
                fd = (loss_plus - loss_minus) / (2 * step)
                ana = float(analytic.reshape(raw.count, -1)[gauss, coord])
                rel = abs(ana - fd) / max(abs(ana), abs(fd), 1e-6)
                records.append(CoordinateRecord(fieldname, gauss, coord, ana, fd, rel))

    rels = np.array([r.rel_error for r in records]) if records else np.zeros(0)
    frac = float(np.mean(rels < REL_TOL_SOFT)) if rels.size else 1.0
    max_rel = float(rels.max()) if rels.size else 0.0
    failures = [r for r in records if r.rel_error > REL_TOL_HARD]
    worst = sorted(records, key=lambda r: -r.rel_error)[:10]
    return GradCheckReport(
        passed=(frac >= SOFT_FRACTION and max_rel <= REL_TOL_HARD),
        n_coordinates=len(records),
        n_excluded=n_excluded,
        frac_within_soft=frac,
        max_rel_error=max_rel,
        mean_rel_error=float(rels.mean()) if rels.size else 0.0,
        worst=worst,
        failures=failures,
        excluded_gaussians=[int(i) for i in culled],
        seed=seed,
        step=step,
    )
