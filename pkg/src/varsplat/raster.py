"""Forward splatting: EWA-style projection of 3D Gaussians to screen space
and tile-based front-to-back alpha compositing of RGB, feature, opacity and
depth channels.

Pixel (ix, iy) is sampled at (ix + 0.5, iy + 0.5). Every splat has a hard
support disc of ``support_sigmas`` projected standard deviations; the disc
is part of the compositing math (applied identically in the tiled and the
reference path), which is what makes tiling an exact optimization. See
docs/math_notes.md for the full convention list.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Camera, Image, SemanticGaussians, build_cov3d
from .sh import lmax_for_coeffs, sh_basis_unchecked


@dataclass(frozen=True)
class RasterConfig:
    """Engine thresholds; defaults are the inherited splatting conventions."""

    tile_size: int = 16
    alpha_ceiling: float = 0.999
    alpha_skip: float = 1.0 / 255.0
    transmittance_stop: float = 1e-4
    dilation: float = 0.3  # px^2 added to the cov2d diagonal (low-pass)
    support_sigmas: Optional[float] = 3.0  # None = untruncated footprint
    condition_limit: float = 1e12
    frustum_expand: float = 1.15


DEFAULT_CONFIG = RasterConfig()
# Smooth variant for finite-difference validation: the hard skip/support
# cutoffs are step discontinuities that central differences may straddle.
SMOOTH_CONFIG = RasterConfig(alpha_skip=0.0, support_sigmas=None)


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray  # (2,) pixel coordinates
    cov2d: np.ndarray  # (2, 2), dilated, positive definite
    depth: float  # camera-space z
    index: int


@dataclass(eq=False)
class RenderOutput:
    rgb: Image
    features: Image
    alpha: Image
    depth: Image
    n_skipped_singular: int = 0


@dataclass(eq=False)
class ProjectedScene:
    """Visible splats in global depth order (ties broken by ascending index)."""

    indices: np.ndarray  # (M,) original Gaussian indices, depth-sorted
    mean2d: np.ndarray  # (M, 2)
    conic: np.ndarray  # (M, 3) packed inverse covariance [a, b, c]
    cov2d: np.ndarray  # (M, 2, 2)
    depth: np.ndarray  # (M,)
    radius: np.ndarray  # (M,) support radius in pixels (inf if untruncated)
    opacity: np.ndarray  # (M,)
    t_cam: np.ndarray  # (M, 3) camera-space means
    cov3d: np.ndarray  # (M, 3, 3)
    jw: np.ndarray  # (M, 2, 3) projection Jacobian times world-to-camera rotation
    valid_mask: np.ndarray  # (N,) True where the Gaussian survived culling
    n_skipped_singular: int


@dataclass(eq=False)
class SceneValues:
    """Per-splat decoded channel values, aligned with ProjectedScene order."""

    rgb: np.ndarray  # (M, 3) after offset and clamp
    rgb_pre: np.ndarray  # (M, 3) before the clamp (backward needs the mask)
    feat: np.ndarray  # (M, D)
    basis_rgb: np.ndarray  # (M, K_rgb)
    basis_feat: np.ndarray  # (M, K_feat)
    view_dir: np.ndarray  # (M, 3) unit, camera center -> Gaussian mean
    view_dist: np.ndarray  # (M,)


@dataclass(eq=False)
class ForwardState:
    """Everything the backward pass needs to recompute per-pixel compositing."""

    config: RasterConfig
    camera: Camera
    proj: ProjectedScene
    values: SceneValues
    n_gaussians: int
    width: int
    height: int
    tiles: list  # (y0, y1, x0, x1, splat index array into proj order)


def project_gaussians(position, scale, rotation, opacity, cam: Camera,
                      config: RasterConfig = DEFAULT_CONFIG) -> ProjectedScene:
    """Project all Gaussians, cull, and depth-sort the survivors."""
    n = position.shape[0]
    w_mat = cam.rotation_matrix
    t_cam = position @ w_mat.T + cam.translation
    z = t_cam[:, 2]

    with np.errstate(divide="ignore", invalid="ignore"):
        xz = t_cam[:, 0] / z
        yz = t_cam[:, 1] / z
    half_w = cam.width / (2 * cam.fx)
    half_h = cam.height / (2 * cam.fy)
    ctr_x = (cam.width / 2 - cam.cx) / cam.fx
    ctr_y = (cam.height / 2 - cam.cy) / cam.fy
    in_front = (z > cam.near) & (z <= cam.far)
    in_frustum = (np.abs(xz - ctr_x) <= config.frustum_expand * half_w) & \
                 (np.abs(yz - ctr_y) <= config.frustum_expand * half_h)
    visible = in_front & in_frustum

    idx = np.flatnonzero(visible)
    if idx.size == 0:
        empty = np.zeros((0,))
        return ProjectedScene(
            indices=idx, mean2d=np.zeros((0, 2)), conic=np.zeros((0, 3)),
            cov2d=np.zeros((0, 2, 2)), depth=empty, radius=empty, opacity=empty,
            t_cam=np.zeros((0, 3)), cov3d=np.zeros((0, 3, 3)), jw=np.zeros((0, 2, 3)),
            valid_mask=np.zeros(n, dtype=bool), n_skipped_singular=0)

    t = t_cam[idx]
    zi = t[:, 2]
    mean2d = np.stack([cam.fx * t[:, 0] / zi + cam.cx,
                       cam.fy * t[:, 1] / zi + cam.cy], axis=1)

    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = cam.fx / zi
    jac[:, 0, 2] = -cam.fx * t[:, 0] / zi**2
    jac[:, 1, 1] = cam.fy / zi
    jac[:, 1, 2] = -cam.fy * t[:, 1] / zi**2
    jw = jac @ w_mat

    cov3d = build_cov3d(scale[idx], rotation[idx])
    cov2d = jw @ cov3d @ np.swapaxes(jw, 1, 2)
    cov2d[:, 0, 0] += config.dilation
    cov2d[:, 1, 1] += config.dilation

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b**2, 0.0))
    lam_max = mid + rad
    lam_min = mid - rad
    well_formed = (lam_min > 0) & (lam_max <= config.condition_limit * lam_min)
    n_singular = int(np.count_nonzero(~well_formed))
    if n_singular:
        keep = well_formed
        idx, t, zi, mean2d, jw, cov3d, cov2d = (
            idx[keep], t[keep], zi[keep], mean2d[keep], jw[keep], cov3d[keep], cov2d[keep])
        a, b, c, lam_max = a[keep], b[keep], c[keep], lam_max[keep]

    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    if config.support_sigmas is None:
        radius = np.full(idx.size, np.inf)
    else:
        radius = config.support_sigmas * np.sqrt(lam_max)

    order = np.argsort(zi, kind="stable")
    valid_mask = np.zeros(n, dtype=bool)
    valid_mask[idx] = True
    return ProjectedScene(
        indices=idx[order], mean2d=mean2d[order], conic=conic[order],
        cov2d=cov2d[order], depth=zi[order], radius=radius[order],
        opacity=np.asarray(opacity)[idx[order]], t_cam=t[order],
        cov3d=cov3d[order], jw=jw[order], valid_mask=valid_mask,
        n_skipped_singular=n_singular)


def project_gaussian(x, cov3d, cam: Camera,
                     config: RasterConfig = DEFAULT_CONFIG) -> Optional[Splat2D]:
    """Screen-space splat of a single Gaussian, or None when culled.

    cov3d is the precomputed 3x3 world-space covariance; the dilation term
    is already applied to the returned 2x2 covariance.
    """
    x = np.asarray(x, dtype=np.float64)
    cov3d = np.asarray(cov3d, dtype=np.float64)
    w_mat = cam.rotation_matrix
    t = w_mat @ x + cam.translation
    z = t[2]
    if not (cam.near < z <= cam.far):
        return None
    half_w = cam.width / (2 * cam.fx)
    half_h = cam.height / (2 * cam.fy)
    if abs(t[0] / z - (cam.width / 2 - cam.cx) / cam.fx) > config.frustum_expand * half_w:
        return None
    if abs(t[1] / z - (cam.height / 2 - cam.cy) / cam.fy) > config.frustum_expand * half_h:
        return None
    jac = np.array([[cam.fx / z, 0.0, -cam.fx * t[0] / z**2],
                    [0.0, cam.fy / z, -cam.fy * t[1] / z**2]])
    jw = jac @ w_mat
    cov2d = jw @ cov3d @ jw.T + config.dilation * np.eye(2)
    mean2d = np.array([cam.fx * t[0] / z + cam.cx, cam.fy * t[1] / z + cam.cy])
    return Splat2D(mean2d=mean2d, cov2d=cov2d, depth=float(z), index=0)


def decode_values(sg: SemanticGaussians, cam: Camera, proj: ProjectedScene) -> SceneValues:
    """SH-decode per-splat colors and features along the camera->mean direction."""
    pos = sg.position[proj.indices]
    delta = pos - cam.center
    dist = np.linalg.norm(delta, axis=1)
    view_dir = delta / dist[:, None] if pos.shape[0] else delta.reshape(0, 3)

    k_rgb = sg.sh_rgb.shape[2]
    k_feat = sg.feat.shape[2]
    basis_rgb = sh_basis_unchecked(view_dir, lmax_for_coeffs(k_rgb))
    basis_feat = sh_basis_unchecked(view_dir, lmax_for_coeffs(k_feat))
    rgb_pre = np.einsum("nck,nk->nc", sg.sh_rgb[proj.indices], basis_rgb) + 0.5
    feat = np.einsum("ndk,nk->nd", sg.feat[proj.indices], basis_feat)
    return SceneValues(rgb=np.maximum(rgb_pre, 0.0), rgb_pre=rgb_pre, feat=feat,
                       basis_rgb=basis_rgb, basis_feat=basis_feat,
                       view_dir=view_dir, view_dist=dist)


def assign_tiles(proj: ProjectedScene, width: int, height: int, tile: int) -> list:
    """Conservative disc/bbox assignment of splats to tiles, preserving depth order."""
    tiles = []
    if proj.indices.size:
        x_lo = proj.mean2d[:, 0] - proj.radius
        x_hi = proj.mean2d[:, 0] + proj.radius
        y_lo = proj.mean2d[:, 1] - proj.radius
        y_hi = proj.mean2d[:, 1] + proj.radius
    for ty0 in range(0, height, tile):
        ty1 = min(ty0 + tile, height)
        for tx0 in range(0, width, tile):
            tx1 = min(tx0 + tile, width)
            if proj.indices.size:
                # pixel centers inside this tile span [t0+0.5, t1-0.5]
                hit = (x_hi >= tx0 + 0.5) & (x_lo <= tx1 - 0.5) & \
                      (y_hi >= ty0 + 0.5) & (y_lo <= ty1 - 0.5)
                sub = np.flatnonzero(hit)
            else:
                sub = np.zeros(0, dtype=np.intp)
            tiles.append((ty0, ty1, tx0, tx1, sub))
    return tiles


def composite_weights(px, py, proj: ProjectedScene, sub, config: RasterConfig):
    """Per-pixel compositing weights for the splat subset ``sub``.

    Returns (w, aux) where w[p, k] = T_k * alpha_k if splat k contributes at
    pixel p else 0, and aux carries the intermediates the backward reuses.
    """
    mu = proj.mean2d[sub]
    con = proj.conic[sub]
    dx = px[:, None] - mu[None, :, 0]
    dy = py[:, None] - mu[None, :, 1]
    q = con[:, 0] * dx * dx + 2.0 * con[:, 1] * dx * dy + con[:, 2] * dy * dy
    g = np.exp(-0.5 * q)
    alpha_raw = proj.opacity[sub] * g
    alpha = np.minimum(alpha_raw, config.alpha_ceiling)
    mask = alpha >= config.alpha_skip
    if config.support_sigmas is not None:
        r = proj.radius[sub]
        mask &= (dx * dx + dy * dy) <= r * r
    alpha_eff = np.where(mask, alpha, 0.0)
    t_after = np.cumprod(1.0 - alpha_eff, axis=1)
    t_before = np.concatenate([np.ones((t_after.shape[0], 1)), t_after[:, :-1]], axis=1)
    include = t_after >= config.transmittance_stop
    w = np.where(include, t_before * alpha_eff, 0.0)
    aux = dict(dx=dx, dy=dy, g=g, alpha_raw=alpha_raw, alpha_eff=alpha_eff,
               mask=mask, t_before=t_before, include=include)
    return w, aux


def _tile_pixels(y0, y1, x0, x1):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return xs.ravel() + 0.5, ys.ravel() + 0.5


def _composite_images(proj: ProjectedScene, channel_values, width, height,
                      config: RasterConfig, tiles, threads: int):
    """Tile-parallel compositing of an (M, C) value matrix plus alpha/depth."""
    n_ch = channel_values.shape[1]
    out = np.zeros((height, width, n_ch))
    alpha_img = np.zeros((height, width))
    depth_acc = np.zeros((height, width))

    def run_tile(tile):
        y0, y1, x0, x1, sub = tile
        if sub.size == 0:
            return
        px, py = _tile_pixels(y0, y1, x0, x1)
        w, _ = composite_weights(px, py, proj, sub, config)
        shape = (y1 - y0, x1 - x0)
        out[y0:y1, x0:x1] = (w @ channel_values[sub]).reshape(shape + (n_ch,))
        alpha_img[y0:y1, x0:x1] = w.sum(axis=1).reshape(shape)
        depth_acc[y0:y1, x0:x1] = (w @ proj.depth[sub]).reshape(shape)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_tile, tiles))
    else:
        for tile in tiles:
            run_tile(tile)
    return out, alpha_img, depth_acc


def _expected_depth(depth_acc, alpha_img):
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(alpha_img > 1e-12, depth_acc / np.maximum(alpha_img, 1e-12), 0.0)
    return d


def rasterize(sg: SemanticGaussians, cam: Camera,
              config: RasterConfig = DEFAULT_CONFIG,
              return_state: bool = False, threads: int = 1):
    """Render a sampled scene: RGB, feature, accumulated-opacity and depth images.

    ``threads`` > 1 composites tiles on a thread pool; outputs are written to
    disjoint slices, so parallel results are identical to serial ones.
    With ``return_state`` the forward state needed by the analytic backward
    pass is returned alongside the output.
    """
    proj = project_gaussians(sg.position, sg.scale, sg.rotation, sg.opacity, cam, config)
    values = decode_values(sg, cam, proj)
    tiles = assign_tiles(proj, cam.width, cam.height, config.tile_size)
    channel_values = np.concatenate([values.rgb, values.feat], axis=1)
    out, alpha_img, depth_acc = _composite_images(
        proj, channel_values, cam.width, cam.height, config, tiles, threads)
    result = RenderOutput(
        rgb=Image(out[:, :, :3]),
        features=Image(out[:, :, 3:]),
        alpha=Image(alpha_img),
        depth=Image(_expected_depth(depth_acc, alpha_img)),
        n_skipped_singular=proj.n_skipped_singular)
    if not return_state:
        return result
    state = ForwardState(config=config, camera=cam, proj=proj, values=values,
                         n_gaussians=sg.count, width=cam.width, height=cam.height,
                         tiles=tiles)
    return result, state


def splat_values(position, scale, rotation, opacity, values, cam: Camera,
                 config: RasterConfig = DEFAULT_CONFIG, threads: int = 1):
    """Composite arbitrary per-Gaussian channel values (no SH decode).

    Returns (value image (H, W, C), alpha image (H, W)).
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] != position.shape[0]:
        raise ValueError("one value row per Gaussian required")
    proj = project_gaussians(position, scale, rotation, opacity, cam, config)
    tiles = assign_tiles(proj, cam.width, cam.height, config.tile_size)
    out, alpha_img, _ = _composite_images(
        proj, values[proj.indices], cam.width, cam.height, config, tiles, threads)
    return out, alpha_img


def rasterize_reference(sg: SemanticGaussians, cam: Camera,
                        config: RasterConfig = DEFAULT_CONFIG) -> RenderOutput:
    """Brute-force equivalence oracle: exhaustive per-pixel front-to-back
    compositing over the full depth-sorted list, no tiling, no accelerations
    beyond the transmittance stop. Same projection and per-splat math as
    ``rasterize``; the compositing is implemented independently.
    """
    if sg.count > 10_000:
        raise ValueError("reference rasterizer is limited to 10^4 Gaussians")
    proj = project_gaussians(sg.position, sg.scale, sg.rotation, sg.opacity, cam, config)
    values = decode_values(sg, cam, proj)

    h, w = cam.height, cam.width
    px, py = _tile_pixels(0, h, 0, w)
    n_px = px.size
    d = sg.feat.shape[1]
    rgb_out = np.zeros((n_px, 3))
    feat_out = np.zeros((n_px, d))
    alpha_out = np.zeros(n_px)
    depth_acc = np.zeros(n_px)
    transmittance = np.ones(n_px)
    alive = np.ones(n_px, dtype=bool)

    for k in range(proj.indices.size):
        dx = px - proj.mean2d[k, 0]
        dy = py - proj.mean2d[k, 1]
        a, b, c = proj.conic[k]
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        alpha = np.minimum(proj.opacity[k] * np.exp(-0.5 * q), config.alpha_ceiling)
        mask = alpha >= config.alpha_skip
        if config.support_sigmas is not None:
            mask &= (dx * dx + dy * dy) <= proj.radius[k] ** 2
        alpha_eff = np.where(mask, alpha, 0.0)
        test_t = transmittance * (1.0 - alpha_eff)
        contribute = alive & (test_t >= config.transmittance_stop)
        wk = np.where(contribute, transmittance * alpha_eff, 0.0)
        rgb_out += wk[:, None] * values.rgb[k]
        feat_out += wk[:, None] * values.feat[k]
        alpha_out += wk
        depth_acc += wk * proj.depth[k]
        transmittance = np.where(contribute, test_t, transmittance)
        alive &= test_t >= config.transmittance_stop

    alpha_img = alpha_out.reshape(h, w)
    return RenderOutput(
        rgb=Image(rgb_out.reshape(h, w, 3)),
        features=Image(feat_out.reshape(h, w, d)),
        alpha=Image(alpha_img),
        depth=Image(_expected_depth(depth_acc.reshape(h, w), alpha_img)),
        n_skipped_singular=proj.n_skipped_singular)
