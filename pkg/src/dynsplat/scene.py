"""Scene containers: Gaussian clouds, pinhole cameras, spherical-harmonic colors.

A cloud stores raw (pre-activation) parameters: scales as logs, opacity as a
logit, orientation as an unnormalized quaternion. Activation happens on the
way into the renderer so optimizer steps stay unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geom import quat_to_rotmat_many

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_band_count(degree):
    return (degree + 1) ** 2


def sh_degree_from_bands(bands):
    degree = int(round(np.sqrt(bands))) - 1
    if sh_band_count(degree) != bands:
        raise ValueError(f"{bands} is not a square band count")
    return degree


@dataclass
class GaussianCloud:
    """Raw parameters of P anisotropic Gaussians with SH appearance."""

    means: np.ndarray  # (P, 3)
    log_scales: np.ndarray  # (P, 3)
    quats: np.ndarray  # (P, 4), (w, x, y, z), not necessarily unit
    opacity_logits: np.ndarray  # (P,)
    sh: np.ndarray  # (P, B, 3), B = (degree + 1)^2

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64)

    def __len__(self):
        return self.means.shape[0]

    @property
    def sh_degree(self):
        return sh_degree_from_bands(self.sh.shape[1])

    def validate(self):
        p = len(self)
        shapes = {
            "means": (self.means.shape, (p, 3)),
            "log_scales": (self.log_scales.shape, (p, 3)),
            "quats": (self.quats.shape, (p, 4)),
            "opacity_logits": (self.opacity_logits.shape, (p,)),
            "sh": (self.sh.shape, (p, self.sh.shape[1] if self.sh.ndim == 3 else 0, 3)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")
        self.sh_degree  # raises on a non-square band count
        for name in ("means", "log_scales", "quats", "opacity_logits", "sh"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains non-finite values")
        if (np.linalg.norm(self.quats, axis=1) < 1e-12).any():
            raise ValueError("quats contain a zero row")
        return self

    def copy(self):
        return GaussianCloud(
            self.means.copy(),
            self.log_scales.copy(),
            self.quats.copy(),
            self.opacity_logits.copy(),
            self.sh.copy(),
        )

    def extent(self):
        """Diagonal of the bounding box of the means (scene size proxy)."""
        if len(self) == 0:
            return 0.0
        span = self.means.max(axis=0) - self.means.min(axis=0)
        return float(np.linalg.norm(span))


def rotation_covariances(rots, log_scales):
    """Per-row world covariance R diag(s^2) R^T from rotation matrices.

    Dynamic scenes pass moved rotations here (delta rotation times canonical),
    so the covariance follows the motion differentiably.
    """
    s = ad.exp(log_scales)
    M = rots * ad.reshape(s, ad.data_of(s).shape[:-1] + (1, 3))  # R @ diag(s)
    return ad.matmul(M, ad.swapaxes(M, -1, -2))


def build_covariances(log_scales, quats):
    """Per-row world covariance R diag(s^2) R^T from log scales and quaternions.

    Accepts tensors or ndarrays; rows map to (3, 3) matrices.
    """
    return rotation_covariances(quat_to_rotmat_many(quats), log_scales)


def gaussian_density(mean, cov, pts):
    """Unnormalized density exp(-0.5 d^T Sigma^-1 d) at query points (N, 3)."""
    d = np.asarray(pts, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    sol = np.linalg.solve(np.asarray(cov, dtype=np.float64), d.T).T
    return np.exp(-0.5 * np.sum(d * sol, axis=-1))


def sh_basis(dirs, degree):
    """Real SH basis values (..., B) for unit directions (..., 3).

    Same band conventions as the usual splatting stacks; graph-capable so view
    directions may depend on deformed centers.
    """
    if degree < 0 or degree > 3:
        raise ValueError("supported SH degrees are 0..3")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    ones = np.ones(ad.data_of(x).shape, dtype=np.float64)
    cols = [ad.Tensor(ones * SH_C0) if ad.is_tensor(x) else ones * SH_C0]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C2[0] * (x * y),
            SH_C2[1] * (y * z),
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * (x * z),
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return ad.stack(cols, axis=-1)


def sh_to_rgb(sh, dirs, degree):
    """Evaluate SH colors for each row and clamp below at zero.

    ``sh`` is (P, B, 3); only the first (degree+1)^2 bands are read, so a
    lower evaluation degree on a higher-degree cloud is allowed.
    """
    bands = sh_band_count(degree)
    basis = sh_basis(dirs, degree)  # (P, bands)
    coeffs = sh[:, :bands, :] if ad.data_of(sh).shape[1] != bands else sh
    P = ad.data_of(basis).shape[0]
    weighted = coeffs * ad.reshape(basis, (P, bands, 1))
    return ad.maximum(ad.sum(weighted, axis=1) + 0.5, 0.0)


@dataclass
class Camera:
    """Pinhole camera; ``world_to_camera`` maps world points into a +z-forward frame."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4)
    znear: float = 0.01

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)

    @classmethod
    def from_camera_angle(cls, camera_angle_x, width, height, camera_to_world, znear=0.01):
        """Construct from a field-of-view angle and a camera-to-world matrix.

        Focal follows fx = W / (2 tan(angle/2)); square pixels; principal
        point at the image center. No axis flip: an identity camera-to-world
        yields an identity world-to-camera.
        """
        fx = width / (2.0 * np.tan(0.5 * float(camera_angle_x)))
        w2c = np.linalg.inv(np.asarray(camera_to_world, dtype=np.float64).reshape(4, 4))
        return cls(int(width), int(height), fx, fx, width / 2.0, height / 2.0, w2c, znear)

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def camera_angle_x(self):
        return 2.0 * np.arctan(self.width / (2.0 * self.fx))

    def camera_to_world(self):
        return np.linalg.inv(self.world_to_camera)


@dataclass
class Frame:
    """One observation: a camera, a normalized timestamp, and (optionally) pixels."""

    camera: Camera
    time: float
    image: np.ndarray | None = None  # (H, W, 3) float in [0, 1]
    name: str = ""


@dataclass
class FrameSet:
    """A split of frames plus the shared background color."""

    frames: list[Frame] = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __len__(self):
        return len(self.frames)

    def times(self):
        """Sorted unique timestamps across the frames."""
        return np.unique(np.array([f.time for f in self.frames], dtype=np.float64))
