"""Rotation helpers: Rodrigues alignment to +z, yaw matrices, SO(3) checks."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ParameterError

Z_AXIS = np.array([0.0, 0.0, 1.0])
# rotation by pi about x, used when the axis to align is antiparallel to z
FLIP_X = np.diag([1.0, -1.0, -1.0])


def skew(n: np.ndarray) -> np.ndarray:
    """Cross-product matrices for a single vector or a stack of vectors."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros(n.shape[:-1] + (3, 3))
    out[..., 0, 1] = -n[..., 2]
    out[..., 0, 2] = n[..., 1]
    out[..., 1, 0] = n[..., 2]
    out[..., 1, 2] = -n[..., 0]
    out[..., 2, 0] = -n[..., 1]
    out[..., 2, 1] = n[..., 0]
    return out


def align_to_z_batch(v3: np.ndarray) -> np.ndarray:
    """Rodrigues rotations taking each row of ``v3`` onto +z."""
    v = np.asarray(v3, dtype=np.float64).reshape(-1, 3)
    cross = np.cross(v, Z_AXIS)
    sin_t = np.linalg.norm(cross, axis=1)
    cos_t = np.clip(v[:, 2], -1.0, 1.0)
    theta = np.arccos(cos_t)
    out = np.broadcast_to(np.eye(3), (v.shape[0], 3, 3)).copy()
    ok = sin_t > 1e-15
    axis = np.zeros_like(v)
    axis[ok] = cross[ok] / sin_t[ok, None]
    k = skew(axis)
    out += np.sin(theta)[:, None, None] * k + (1.0 - cos_t)[:, None, None] * (k @ k)
    # parallel inputs keep the identity, antiparallel ones take the fixed flip
    anti = ~ok & (cos_t < 0)
    out[anti] = FLIP_X
    return out


def align_to_z(v3) -> np.ndarray:
    """Rotation ``R`` with ``R @ v3 == (0, 0, 1)``, from Rodrigues' formula about ``v3 x z``."""
    v = np.asarray(v3, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ParameterError("v3 must be a unit vector")
    return align_to_z_batch(v[None])[0]


def yaw_rotation(d: float, W: int) -> np.ndarray:
    """Rotation about z by ``2 pi d / W``."""
    if W < 2:
        raise ParameterError("W must be at least 2")
    a = 2.0 * np.pi * d / W
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.abs(R.T @ R - np.eye(3)).max() < tol and abs(np.linalg.det(R) - 1.0) < tol)


def project_to_so3(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def random_rotation(rng: np.random.Generator, max_angle_deg: float = 180.0) -> np.ndarray:
    """Uniform random axis with an angle drawn uniformly in ``[0, max_angle_deg]``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    return Rotation.from_rotvec(axis * angle).as_matrix()


def rotation_angle_deg(R: np.ndarray) -> float:
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))
