"""Scene and camera types, raw-to-constrained activation, 3D covariance.

Conventions (see docs/math_notes.md):
  * quaternions are (w, x, y, z), unit norm, world-to-camera for cameras;
  * camera space is x right, y down, z forward; depth = camera-space z;
  * all in-memory math is float64, persistence is float32 (fileio).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logit

QUAT_NORM_TOL = 1e-6
_LOG_SIGMA_CLIP = 80.0  # keeps exp() finite for any finite stored value


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera pose, depth range."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # unit quaternion (w, x, y, z), world-to-camera
    translation: np.ndarray  # 3-vector, X_cam = R @ X_world + t
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError(f"require 0 < near < far, got near={self.near} far={self.far}")
        if self.rotation.shape != (4,) or self.translation.shape != (3,):
            raise ValueError("rotation must be a quaternion, translation a 3-vector")
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > QUAT_NORM_TOL:
            raise ValueError(f"camera quaternion norm {n} deviates from 1 beyond {QUAT_NORM_TOL}")

    @property
    def rotation_matrix(self) -> np.ndarray:
        """World-to-camera rotation as a 3x3 matrix."""
        return quat_to_rotmat(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation_matrix.T @ self.translation


@dataclass(eq=False)
class GaussianParamsRaw:
    """Unconstrained per-Gaussian parameters, the quantities an optimizer updates.

    Shapes share a leading count N: position_raw (N,3), scale_raw (N,3),
    rotation_raw (N,4), opacity_raw (N,), sh_rgb (N,3,K_rgb),
    sh_feat_mu (N,D,K_feat), sh_feat_log_sigma (N,D,K_feat).
    """

    position_raw: np.ndarray
    scale_raw: np.ndarray
    rotation_raw: np.ndarray
    opacity_raw: np.ndarray
    sh_rgb: np.ndarray
    sh_feat_mu: np.ndarray
    sh_feat_log_sigma: np.ndarray

    FIELDS = (
        "position_raw",
        "scale_raw",
        "rotation_raw",
        "opacity_raw",
        "sh_rgb",
        "sh_feat_mu",
        "sh_feat_log_sigma",
    )

    def __post_init__(self):
        for name in self.FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.position_raw.shape[0]
        expected = {
            "position_raw": (n, 3),
            "scale_raw": (n, 3),
            "rotation_raw": (n, 4),
            "opacity_raw": (n,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
        if self.sh_rgb.ndim != 3 or self.sh_rgb.shape[:2] != (n, 3):
            raise ValueError("sh_rgb must have shape (N, 3, K_rgb)")
        if self.sh_feat_mu.ndim != 3 or self.sh_feat_mu.shape[0] != n:
            raise ValueError("sh_feat_mu must have shape (N, D, K_feat)")
        if self.sh_feat_log_sigma.shape != self.sh_feat_mu.shape:
            raise ValueError("sh_feat_log_sigma must match sh_feat_mu shape")
        for name in self.FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def count(self) -> int:
        return self.position_raw.shape[0]

    def copy(self) -> "GaussianParamsRaw":
        return GaussianParamsRaw(*(getattr(self, f).copy() for f in self.FIELDS))


@dataclass(eq=False)
class VariationalGaussians:
    """Activated scene: geometry, opacity, RGB SH, and per-feature coefficient
    normal distributions (feat_mu, feat_sigma).

    ``raw`` and ``scale_range`` record the pre-activation parameters this
    scene was activated from (when it was); fileio persists those exact
    values so save/load round-trips are bit-stable.
    """

    position: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N, 3), positive
    rotation: np.ndarray  # (N, 4) unit quaternions
    opacity: np.ndarray  # (N,) in [0, 1]
    sh_rgb: np.ndarray  # (N, 3, K_rgb)
    feat_mu: np.ndarray  # (N, D, K_feat)
    feat_sigma: np.ndarray  # (N, D, K_feat), positive
    raw: Optional[GaussianParamsRaw] = None
    scale_range: Optional[tuple] = None

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feat_mu.shape[1]


@dataclass(eq=False)
class SemanticGaussians:
    """A sampled scene instance: structural parameters of the source scene
    plus one concrete draw ``feat`` of the feature coefficients.

    ``eps`` records the standard-normal draw behind ``feat`` (pathwise
    derivative hook for the backward pass); ``source`` the scene sampled from.
    """

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: np.ndarray
    sh_rgb: np.ndarray
    feat: np.ndarray  # (N, D, K_feat)
    eps: Optional[np.ndarray] = None
    source: Optional[VariationalGaussians] = None

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feat.shape[1]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the fitting objective's terms.

    The perceptual weights are carried for config fidelity but multiply no
    term here (perceptual losses need pretrained networks, out of scope).
    """

    rec_l1: float = 1.0
    rec_perceptual: float = 1.0
    aux_mse: float = 10.0
    aux_perceptual: float = 0.5

    def __post_init__(self):
        for name in ("rec_l1", "rec_perceptual", "aux_mse", "aux_perceptual"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass(eq=False)
class Image:
    """Row-major float image, shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise ValueError("image data must have shape (H, W, C)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite samples")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z); batched over
    leading dimensions. Input is assumed normalized."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Normalize quaternions robustly (max-abs pre-scaling avoids overflow).

    Raises on (near-)zero input, where the direction is undefined.
    """
    q = np.asarray(q, dtype=np.float64)
    peak = np.max(np.abs(q), axis=-1, keepdims=True)
    if np.any(peak == 0.0):
        raise ValueError("degenerate quaternion: zero norm")
    scaled = q / peak
    return scaled / np.linalg.norm(scaled, axis=-1, keepdims=True)


def activate_params(raw: GaussianParamsRaw, scale_range: tuple) -> VariationalGaussians:
    """Map unconstrained parameters onto the scene's constrained domain.

    scale: scaled/shifted sigmoid onto [s_min, s_max]; rotation: quaternion
    normalization; opacity: sigmoid; feature sigma: exp of the stored
    log-sigma. Positions and SH coefficients pass through. Elementwise and
    differentiable; the backward pass applies the matching Jacobians.
    """
    s_min, s_max = float(scale_range[0]), float(scale_range[1])
    if not (0 < s_min < s_max):
        raise ValueError(f"require 0 < s_min < s_max, got ({s_min}, {s_max})")
    scale = s_min + expit(raw.scale_raw) * (s_max - s_min)
    rotation = normalize_quaternion(raw.rotation_raw)
    opacity = expit(raw.opacity_raw)
    feat_sigma = np.exp(np.clip(raw.sh_feat_log_sigma, -_LOG_SIGMA_CLIP, _LOG_SIGMA_CLIP))
    return VariationalGaussians(
        position=raw.position_raw.copy(),
        scale=scale,
        rotation=rotation,
        opacity=opacity,
        sh_rgb=raw.sh_rgb.copy(),
        feat_mu=raw.sh_feat_mu.copy(),
        feat_sigma=feat_sigma,
        raw=raw,
        scale_range=(s_min, s_max),
    )


def invert_activation(g: VariationalGaussians, scale_range: tuple) -> GaussianParamsRaw:
    """Analytic inverse of activate_params (used when no raw provenance exists).

    Opacity and scale are nudged inside the open interval before logit so
    saturated values stay finite.
    """
    s_min, s_max = float(scale_range[0]), float(scale_range[1])
    tiny = 1e-12
    frac = np.clip((g.scale - s_min) / (s_max - s_min), tiny, 1 - tiny)
    return GaussianParamsRaw(
        position_raw=g.position.copy(),
        scale_raw=logit(frac),
        rotation_raw=g.rotation.copy(),
        opacity_raw=logit(np.clip(g.opacity, tiny, 1 - tiny)),
        sh_rgb=g.sh_rgb.copy(),
        sh_feat_mu=g.feat_mu.copy(),
        sh_feat_log_sigma=np.log(g.feat_sigma),
    )


def build_cov3d(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """3D covariance M diag(scale)^2 M^T from positive scales and a unit
    quaternion; batched over leading dimensions."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    norms = np.linalg.norm(rotation, axis=-1)
    if np.any(np.abs(norms - 1.0) > QUAT_NORM_TOL):
        raise ValueError(f"quaternion norm deviates from 1 beyond {QUAT_NORM_TOL}")
    if np.any(scale <= 0):
        raise ValueError("scales must be strictly positive")
    m = quat_to_rotmat(rotation)
    ms = m * (scale[..., None, :] ** 2)  # M diag(S^2)
    return ms @ np.swapaxes(m, -1, -2)


@dataclass(frozen=True)
class Violation:
    index: int
    field: str
    message: str


@dataclass
class SceneReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "scene valid"
        lines = [f"[{v.index}] {v.field}: {v.message}" for v in self.violations]
        return "\n".join(lines)


def validate_scene(g: VariationalGaussians) -> SceneReport:
    """Diagnostic invariant check; lists every violation with its Gaussian index."""
    report = SceneReport()

    def flag(mask, fieldname, message):
        for i in np.flatnonzero(mask):
            report.violations.append(Violation(int(i), fieldname, message))

    flag(~np.all(np.isfinite(g.position), axis=1), "position", "non-finite value")
    flag(~np.all(np.isfinite(g.scale), axis=1), "scale", "non-finite value")
    flag(np.any(g.scale <= 0, axis=1) & np.all(np.isfinite(g.scale), axis=1),
         "scale", "non-positive scale")
    flag(~np.all(np.isfinite(g.rotation), axis=1), "rotation", "non-finite value")
    norm_err = np.abs(np.linalg.norm(g.rotation, axis=1) - 1.0)
    flag((norm_err > QUAT_NORM_TOL) & np.all(np.isfinite(g.rotation), axis=1),
         "rotation", "non-unit quaternion")
    flag(~np.isfinite(g.opacity), "opacity", "non-finite value")
    flag((g.opacity < 0) | (g.opacity > 1), "opacity", "opacity out of range")
    flag(~np.all(np.isfinite(g.sh_rgb), axis=(1, 2)), "sh_rgb", "non-finite value")
    flag(~np.all(np.isfinite(g.feat_mu), axis=(1, 2)), "feat_mu", "non-finite value")
    flag(~np.all(np.isfinite(g.feat_sigma), axis=(1, 2)), "feat_sigma", "non-finite value")
    flag(np.any(g.feat_sigma <= 0, axis=(1, 2)) & np.all(np.isfinite(g.feat_sigma), axis=(1, 2)),
         "feat_sigma", "non-positive sigma")
    return report


def scene_extent_from_cameras(cameras) -> float:
    """Bounding-sphere radius of the camera centers (scene scale heuristic)."""
    centers = np.stack([c.center for c in cameras])
    mid = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - mid, axis=1)))
    return radius if radius > 1e-6 else 1.0


def scale_range_from_extent(extent: float) -> tuple:
    """Default activation range for Gaussian scales given the scene extent."""
    return (1e-4 * extent, 0.5 * extent)
