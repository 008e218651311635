"""Rotation representations, rigid transforms, and positional encoding.

Rotations travel in three forms: unit quaternions ``(w, x, y, z)`` for the
per-Gaussian orientation parameters, axis-angle vectors (so(3)) for predicted
rigid motions, and 3x3 matrices inside the rendering math. The conversion
functions that appear in the training graph (``quat_to_rotmat_many``,
``so3_exp_many``, ``positional_encode``) accept either ndarrays or autodiff
tensors; the remaining conversions are plain NumPy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_TAYLOR_EPS = 1e-12  # squared-angle threshold below which series expansions kick in


@dataclass
class RigidTransform:
    """Axis-angle rotation ``omega`` (rad·axis) plus translation ``trans``."""

    omega: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)

    def matrix(self):
        return so3_exp(self.omega)

    def apply(self, pts):
        return pts @ self.matrix().T + self.trans


def quat_to_rotmat_many(q):
    """Rows of unit-normalized quaternions (..., 4) to matrices (..., 3, 3)."""
    n = ad.sqrt(ad.sum(q * q, axis=-1, keepdims=True))
    q = q / n
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r10 = 2.0 * (x * y + w * z)
    r11 = 1.0 - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = 1.0 - 2.0 * (x * x + y * y)
    rows = [
        ad.stack([r00, r01, r02], axis=-1),
        ad.stack([r10, r11, r12], axis=-1),
        ad.stack([r20, r21, r22], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def quat_to_rotmat(q):
    return np.asarray(quat_to_rotmat_many(np.asarray(q, dtype=np.float64)))


def rotmat_to_quat(R):
    """Matrix to unit quaternion (w >= 0), stable across the whole angle range."""
    R = np.asarray(R, dtype=np.float64)
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s])
    elif m00 >= m11 and m00 >= m22:
        s = 2.0 * np.sqrt(1.0 + m00 - m11 - m22)
        q = np.array([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s])
    elif m11 >= m22:
        s = 2.0 * np.sqrt(1.0 + m11 - m00 - m22)
        q = np.array([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m22 - m00 - m11)
        q = np.array([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    """Hamilton product, batched over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def axis_angle_to_quat(omega):
    """Axis-angle rows (..., 3) to unit quaternions (..., 4)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    # sin(θ/2)/θ with series fallback 1/2 - θ²/48
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half), k * omega], axis=-1)


def quat_conjugate(q):
    """Conjugate rows (..., 4): negated vector part; the inverse for unit rows."""
    q = np.asarray(q, dtype=np.float64)
    return np.concatenate([q[..., :1], -q[..., 1:]], axis=-1)


def quat_to_axis_angle(q):
    """Quaternion rows to axis-angle on the short branch (angle in [0, pi]).

    Rows are normalized and sign-fixed (w >= 0) first, so q and -q map to the
    same rotation; inverts axis_angle_to_quat for angles below pi.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    q = q * np.where(q[..., :1] < 0.0, -1.0, 1.0)
    w = np.clip(q[..., :1], -1.0, 1.0)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)  # sin(theta/2), nonnegative
    theta = 2.0 * np.arctan2(s, w)
    small = s < 1e-8
    # theta / sin(theta/2) -> 2 as theta -> 0; the correction is below 1 ulp there
    k = np.where(small, 2.0, theta / np.where(small, 1.0, s))
    return k * v


def so3_exp_many(omega):
    """Rodrigues map for rows (..., 3) -> (..., 3, 3), graph-capable.

    Series branches take over below squared angle 1e-12 so gradients stay
    finite at the identity.
    """
    w0, w1, w2 = omega[..., 0], omega[..., 1], omega[..., 2]
    theta2 = w0 * w0 + w1 * w1 + w2 * w2
    small = ad.data_of(theta2) < _TAYLOR_EPS
    t2_safe = ad.where(small, np.ones_like(small, dtype=np.float64), theta2)
    theta = ad.sqrt(t2_safe)
    # A = sin θ / θ, B = (1 - cos θ) / θ²
    A = ad.where(small, 1.0 - theta2 / 6.0, ad.sin(theta) / theta)
    B = ad.where(small, 0.5 - theta2 / 24.0, (1.0 - ad.cos(theta)) / t2_safe)
    r00 = 1.0 + B * (w0 * w0 - theta2)
    r11 = 1.0 + B * (w1 * w1 - theta2)
    r22 = 1.0 + B * (w2 * w2 - theta2)
    r01 = B * w0 * w1 - A * w2
    r10 = B * w0 * w1 + A * w2
    r02 = B * w0 * w2 + A * w1
    r20 = B * w0 * w2 - A * w1
    r12 = B * w1 * w2 - A * w0
    r21 = B * w1 * w2 + A * w0
    rows = [
        ad.stack([r00, r01, r02], axis=-1),
        ad.stack([r10, r11, r12], axis=-1),
        ad.stack([r20, r21, r22], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def so3_exp(omega):
    return np.asarray(so3_exp_many(np.asarray(omega, dtype=np.float64)))


def _check_rotation(R, atol=1e-5):
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > atol or np.linalg.det(R) < 0.5:
        raise ValueError(f"matrix is not a rotation (orthogonality defect {err:.3g})")


def so3_log(R):
    """Inverse Rodrigues map; result angle lies in [0, pi].

    Raises ValueError when the input is not a rotation matrix. Goes through
    the quaternion form, which stays stable near both 0 and pi.
    """
    R = np.asarray(R, dtype=np.float64)
    _check_rotation(R)
    q = rotmat_to_quat(R)
    w, v = q[0], q[1:]
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        return 2.0 * v
    return (2.0 * np.arctan2(nv, w) / nv) * v


def so3_log_many(Rs):
    Rs = np.asarray(Rs, dtype=np.float64)
    return np.stack([so3_log(R) for R in Rs.reshape(-1, 3, 3)]).reshape(Rs.shape[:-2] + (3,))


def rigid_compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform applying ``inner`` first, then ``outer``."""
    Ro, Ri = outer.matrix(), inner.matrix()
    return RigidTransform(so3_log(Ro @ Ri), Ro @ inner.trans + outer.trans)


def rigid_inverse(T: RigidTransform) -> RigidTransform:
    R = T.matrix()
    return RigidTransform(-T.omega, -(R.T @ T.trans))


def align_rotation_branch(omega_to, omega_ref):
    """Shift ``omega_to`` by a 2-pi branch when that lands closer to ``omega_ref``.

    Rows with angle below 1e-12 are left untouched (no defined axis).
    """
    omega_to = np.asarray(omega_to, dtype=np.float64)
    omega_ref = np.asarray(omega_ref, dtype=np.float64)
    theta = np.linalg.norm(omega_to, axis=-1, keepdims=True)
    safe = np.where(theta < 1e-12, 1.0, theta)
    alt = omega_to * (1.0 - 2.0 * np.pi / safe)
    use_alt = (np.linalg.norm(alt - omega_ref, axis=-1) < np.linalg.norm(omega_to - omega_ref, axis=-1)) & (
        theta[..., 0] >= 1e-12
    )
    return np.where(use_alt[..., None], alt, omega_to)


def interpolate_rigid_arrays(omega1, trans1, omega2, trans2, w):
    """Row-wise linear interpolation in axis-angle space with branch alignment."""
    omega2 = align_rotation_branch(omega2, omega1)
    return (1.0 - w) * np.asarray(omega1) + w * omega2, (1.0 - w) * np.asarray(trans1) + w * np.asarray(trans2)


def interpolate_rigid(T1: RigidTransform, T2: RigidTransform, w: float) -> RigidTransform:
    """Blend two rigid transforms; w=0 gives T1, w=1 gives T2 exactly."""
    if w == 0.0:
        return RigidTransform(T1.omega.copy(), T1.trans.copy())
    if w == 1.0:
        return RigidTransform(T2.omega.copy(), T2.trans.copy())
    o, t = interpolate_rigid_arrays(T1.omega, T1.trans, T2.omega, T2.trans, float(w))
    return RigidTransform(o, t)


def rotation_angle_between(Ra, Rb):
    """Geodesic angle in radians between two rotation matrices."""
    c = 0.5 * (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def positional_encode(x, num_freqs):
    """Sinusoidal features, per input scalar: (sin 2^0 x, cos 2^0 x, ..., cos 2^{L-1} x).

    Input (..., D) maps to (..., 2*L*D); frequencies double per band.
    """
    freqs = 2.0 ** np.arange(num_freqs, dtype=np.float64)
    scaled = ad.reshape(x, ad.data_of(x).shape + (1,)) * freqs
    enc = ad.stack([ad.sin(scaled), ad.cos(scaled)], axis=-1)
    out_shape = ad.data_of(x).shape[:-1] + (ad.data_of(x).shape[-1] * 2 * num_freqs,)
    return ad.reshape(enc, out_shape)
