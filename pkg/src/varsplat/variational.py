"""Sampling concrete scene instances from a variational scene, opacity-driven
background noise fill, and uncertainty rendering.

All randomness comes from counter-based streams (rng module): per-Gaussian
streams for coefficient sampling, per-absolute-pixel streams for the
background fill. Sampling is therefore order-independent, parallel-safe,
and commutes with cropping.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .model import Camera, Image, SemanticGaussians, VariationalGaussians
from .raster import DEFAULT_CONFIG, RasterConfig, splat_values
from .rng import DOMAIN_FEATURES, DOMAIN_PIXELS, RngStream


def sample_semantic(g: VariationalGaussians, rng: RngStream,
                    eps: Optional[np.ndarray] = None) -> SemanticGaussians:
    """Draw one scene instance: feat = feat_mu + eps * feat_sigma per
    coefficient, eps ~ N(0,1) from the Gaussian-indexed stream.

    ``eps`` overrides the drawn noise (test hook; broadcast against the
    coefficient array). Structural parameters are shared with the source.
    """
    n, d, k = g.feat_mu.shape
    if eps is None:
        entity = np.arange(n, dtype=np.uint64)[:, None, None]
        draw = np.arange(d * k, dtype=np.uint64).reshape(1, d, k)
        eps_arr = rng.normal(DOMAIN_FEATURES, entity, draw)
    else:
        eps_arr = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n, d, k)).copy()
    feat = g.feat_mu + eps_arr * g.feat_sigma
    return SemanticGaussians(
        position=g.position, scale=g.scale, rotation=g.rotation,
        opacity=g.opacity, sh_rgb=g.sh_rgb, feat=feat, eps=eps_arr, source=g)


def background_fill(f_ren: Image, opacity: Image, rng: RngStream,
                    origin: Tuple[int, int] = (0, 0)) -> Image:
    """Fill unobserved regions with noise: F = F_ren + sqrt(1 - O) * eps,
    eps ~ N(0,1) per pixel per channel, so the fill variance is 1 - O.

    Pixel streams are keyed by absolute coordinates ``origin + (x, y)``, so
    filling a crop with the matching origin reproduces the full-image fill.
    """
    f = f_ren.data
    o = opacity.data[:, :, 0] if opacity.data.ndim == 3 else opacity.data
    if o.shape != f.shape[:2]:
        raise ValueError("opacity image shape must match the feature image")
    if np.any(o < -1e-6) or np.any(o > 1 + 1e-6):
        raise ValueError("invalid opacity image: values outside [0, 1]")
    o = np.clip(o, 0.0, 1.0)

    h, w, c = f.shape
    oy, ox = int(origin[1]), int(origin[0])
    ys = (np.arange(h, dtype=np.uint64) + np.uint64(oy))[:, None, None]
    xs = (np.arange(w, dtype=np.uint64) + np.uint64(ox))[None, :, None]
    pixel_id = ys * np.uint64(1 << 32) + xs
    draw = np.arange(c, dtype=np.uint64)[None, None, :]
    eps = rng.normal(DOMAIN_PIXELS, pixel_id, draw)
    return Image(f + np.sqrt(1.0 - o)[:, :, None] * eps)


def uncertainty_scalars(g: VariationalGaussians) -> np.ndarray:
    """Per-Gaussian uncertainty: channel mean of the view-independent (DC)
    band of feat_sigma."""
    return g.feat_sigma[:, :, 0].mean(axis=1)


def render_uncertainty(g: VariationalGaussians, cam: Camera,
                       config: RasterConfig = DEFAULT_CONFIG,
                       threads: int = 1) -> Image:
    """Splat per-Gaussian uncertainty and composite against a unit-variance
    background: out = rendered_sigma + (1 - O) * 1."""
    sigma = uncertainty_scalars(g)
    rendered, alpha = splat_values(g.position, g.scale, g.rotation, g.opacity,
                                   sigma[:, None], cam, config, threads)
    return Image(rendered[:, :, 0] + (1.0 - alpha))
