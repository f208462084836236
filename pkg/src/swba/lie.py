"""SO(3)/SE(3) helpers. Vectorized over leading dimensions where cheap.

Tangent vectors of SE(3) are ordered ``[rho, omega]`` (translation first).
Increments are applied on the right: ``T <- T * Exp(delta)``.
"""

import math

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL = 1e-10


def skew(v):
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coeffs(theta2):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series fallbacks."""
    if np.ndim(theta2) == 0:
        theta2 = float(theta2)
        if theta2 < _SMALL:
            return 1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0
        t = math.sqrt(theta2)
        st = math.sin(t)
        return st / t, (1.0 - math.cos(t)) / theta2, (t - st) / (theta2 * t)
    theta2 = np.asarray(theta2, dtype=float)
    small = theta2 < _SMALL
    t2 = np.where(small, 1.0, theta2)
    t = np.sqrt(t2)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(t)) / t2)
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (t - np.sin(t)) / (t2 * t))
    return a, b, c


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    K = skew(w)
    if w.ndim == 1:
        a, b, _ = _coeffs(float(w @ w))
        return np.eye(3) + a * K + b * (K @ K)
    a, b, _ = _coeffs(np.sum(w * w, axis=-1))
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    if R.shape == (3, 3):
        c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
        if c > -0.9:
            w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
            s = math.sqrt(float(w @ w))
            theta = math.atan2(s, min(c, 1.0))
            f = theta / s if s > 1e-8 else 1.0 + s * s / 6.0
            return f * w
    # Angles near pi (and batches) go through the quaternion route.
    return Rotation.from_matrix(R).as_rotvec()


def so3_right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    K = skew(phi)
    if theta2 < _SMALL:
        coef = 1.0 / 12.0
    else:
        t = np.sqrt(theta2)
        coef = 1.0 / theta2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def _left_jacobian(w):
    _, b, c = _coeffs(float(w @ w))
    K = skew(w)
    return np.eye(3) + b * K + c * (K @ K)


def se3_exp(xi):
    """Return ``(R, t)`` for the tangent vector ``xi = [rho, omega]``."""
    xi = np.asarray(xi, dtype=float)
    rho, omega = xi[:3], xi[3:6]
    return so3_exp(omega), _left_jacobian(omega) @ rho


def se3_log(R, t):
    omega = so3_log(R)
    theta2 = float(omega @ omega)
    K = skew(omega)
    if theta2 < _SMALL:
        coef = 1.0 / 12.0
    else:
        th = np.sqrt(theta2)
        coef = (1.0 - th * np.sin(th) / (2.0 * (1.0 - np.cos(th)))) / theta2
    V_inv = np.eye(3) - 0.5 * K + coef * (K @ K)
    return np.concatenate([V_inv @ np.asarray(t, dtype=float), omega])


def orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def quat_xyzw(R):
    return Rotation.from_matrix(R).as_quat()


def rot_from_quat_xyzw(q):
    return Rotation.from_quat(q).as_matrix()
