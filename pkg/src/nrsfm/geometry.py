"""Rotation-group helpers, orthographic projection and centering."""

import numpy as np

from . import autodiff as ad
from .autodiff import hat_array, rodrigues_value_and_jacobian

__all__ = [
    "hat", "rot_expm", "rot_expm_jacobian", "rot_log", "project", "center_view",
    "center_structure", "sample_rotation", "sample_rotations", "sample_inplane_rotation",
    "inplane_rotation", "rotation_angle",
]

PROJECTION = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _check_finite(x, what):
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError(f"{what} must be finite")
    return x


def hat(omega):
    """Skew matrix ``A`` with ``A @ x == np.cross(omega, x)``."""
    omega = _check_finite(omega, "omega")
    if omega.shape[-1:] != (3,):
        raise ValueError(f"expected a 3-vector, got shape {omega.shape}")
    return hat_array(omega)


def rot_expm(theta):
    """Rotation matrix ``expm(hat(theta))`` (Rodrigues' formula).

    Accepts a single axis-angle 3-vector or a stack of them; a
    :class:`~nrsfm.autodiff.Tensor` input yields a differentiable result.
    """
    if isinstance(theta, ad.Tensor):
        return ad.rodrigues(theta)
    theta = _check_finite(theta, "theta")
    return rodrigues_value_and_jacobian(theta, jacobian=False)[0]


def rot_expm_jacobian(theta):
    """Partial derivatives ``dR/dtheta_i``, shape ``(..., 3, 3, 3)``."""
    theta = _check_finite(theta, "theta")
    return rodrigues_value_and_jacobian(theta)[1]


def rot_log(R):
    """Axis-angle vector of a rotation matrix (angle in ``[0, pi]``)."""
    R = np.asarray(R, dtype=np.float64)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos = (np.trace(R) - 1.0) / 2.0
    sin = 0.5 * np.linalg.norm(w)
    angle = np.arctan2(sin, cos)
    if angle < 1e-8:
        return 0.5 * w
    if angle > 2.5:
        # the skew part is small here; read the axis off (1 - cos) u u^T
        B = 0.5 * (R + R.T) - cos * np.eye(3)
        axis = B[np.argmax(np.diag(B))]
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        return angle * axis
    return angle / (2.0 * sin) * w


def rotation_angle(R):
    cos = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0))


def project(X):
    """Orthographic projection: the first two rows of a 3xK structure."""
    if isinstance(X, ad.Tensor):
        if X.shape[-2] != 3:
            raise ValueError(f"expected 3xK structure, got {X.shape}")
        return X[..., :2, :]
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[-2] != 3:
        raise ValueError(f"expected 3xK structure, got {X.shape}")
    return X[..., :2, :].copy()


def center_view(Y, v):
    """Subtract the centroid of the visible keypoints; hidden columns become zero.

    Works on a single ``(2, K)`` view or a stack ``(N, 2, K)``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    count = v.sum(axis=-1)
    if np.any(count <= 0):
        raise ValueError("center_view needs at least one visible keypoint")
    centroid = (Y * v[..., None, :]).sum(axis=-1) / count[..., None]
    return (Y - centroid[..., None]) * v[..., None, :]


def center_structure(X):
    X = np.asarray(X, dtype=np.float64)
    return X - X.mean(axis=-1, keepdims=True)


def _quaternion_to_matrix(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def sample_rotations(rng, n):
    """``n`` Haar-uniform rotations from normalized Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return _quaternion_to_matrix(q)


def sample_rotation(rng):
    return sample_rotations(rng, 1)[0]


def inplane_rotation(angle):
    """2x2 image rotation and its 3x3 embedding about the optical (z) axis."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    r2 = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    r3 = np.zeros(angle.shape + (3, 3))
    r3[..., :2, :2] = r2
    r3[..., 2, 2] = 1.0
    return r2, r3


def sample_inplane_rotation(rng, n=None):
    """Random in-plane rotation with angle uniform on ``[0, 2*pi)``.

    Returns ``(r2, r3)``; with ``n`` given, stacks of ``n`` of each.
    """
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return inplane_rotation(angle)
