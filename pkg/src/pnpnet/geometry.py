"""Rotation, projection and reprojection primitives.

Conventions used everywhere in the package:

* A rotation is the axis-angle vector ``omega = theta * s`` with ``|s| = 1``.
  Canonical form keeps ``theta`` in ``[0, pi]``.
* A pose maps world points into the camera frame: ``p = R a + t``.
* Image coordinates are centred on the principal point and ``K = diag(f, f, 1)``,
  so ``b = f * (p_x / p_z, p_y / p_z)``.
* Residuals are ``C(a) - b`` (predicted minus observed).
* Jacobian columns are ordered ``(t_x, t_y, t_z, w_x, w_y, w_z)``.

The lower-case array functions (``rodrigues``, ``reprojection`` ...) accept any
number of leading batch dimensions and are what the solvers use internally.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateDepth, NonPositiveFocal

SMALL_ANGLE = 1e-8
DEPTH_EPS = 1e-12


def skew(v):
    """Cross-product matrix ``[v]x`` for ``v[..., 3]``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def canonical_omega(omega):
    """Wrap axis-angle vectors so that the angle lies in ``[0, pi]``."""
    omega = np.array(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    wrapped = np.mod(theta, 2 * np.pi)
    flip = wrapped > np.pi
    new_theta = np.where(flip, 2 * np.pi - wrapped, wrapped)
    scale = np.where(theta > 0, new_theta / np.where(theta > 0, theta, 1.0), 0.0)
    scale = np.where(flip, -scale, scale)
    return np.where(theta > np.pi, omega * scale, omega)


def rodrigues(omega):
    """Rotation matrices ``I + sin(th) M + (1 - cos(th)) M^2`` for ``omega[..., 3]``."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)[..., None, None]
    K = skew(omega)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def rodrigues_grad(omega):
    """Partial derivatives ``dR/dw_k`` stacked as ``[..., 3, 3, 3]`` (k first).

    Uses ``dR/dw_k = (w_k [w]x + [w x (I - R) e_k]x) R / th^2`` away from zero and
    the derivative of the second-order expansion ``I + [w]x + [w]x^2 / 2`` below
    ``SMALL_ANGLE``.
    """
    omega = np.asarray(omega, dtype=float)
    R = rodrigues(omega)
    theta2 = np.sum(omega**2, axis=-1)
    W = skew(omega)
    E = skew(np.eye(3))  # E[k] = [e_k]x
    I_minus_R = np.eye(3) - R
    # column k of (I - R) crossed with omega
    cols = np.swapaxes(I_minus_R, -1, -2)  # [..., k, 3]
    cross = np.cross(omega[..., None, :], cols)
    big = (omega[..., :, None, None] * W[..., None, :, :] + skew(cross)) @ R[..., None, :, :]
    big = big / np.where(theta2 > 0, theta2, 1.0)[..., None, None, None]
    small = E + 0.5 * (E @ W[..., None, :, :] + W[..., None, :, :] @ E)
    use_small = (np.sqrt(theta2) < SMALL_ANGLE)[..., None, None, None]
    return np.where(use_small, small, big)


def rotation_angle_between(R1, R2):
    """Geodesic distance ``arccos((tr(R1 R2^T) - 1) / 2)`` between rotation matrices.

    Evaluated as ``atan2(sin, cos)`` with the sine taken from the skew part of
    ``R1 R2^T``: the same angle, but without the loss of precision arccos
    suffers near 0 and pi.
    """
    M = R1 @ np.swapaxes(R2, -1, -2)
    c = np.clip((np.trace(M, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    axial = np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0],
                      M[..., 1, 0] - M[..., 0, 1]], axis=-1)
    return np.arctan2(np.linalg.norm(axial, axis=-1) / 2.0, c)


def reprojection(t, omega, f, a, b, jac=True):
    """Residuals (and optionally Jacobians) for batched pose/point arrays.

    Shapes: ``t, omega [..., 3]``, ``f [...]``, ``a [..., n, 3]``, ``b [..., n, 2]``.
    Returns ``r [..., n, 2]``, ``J [..., n, 2, 6]`` (None if ``jac`` is False) and
    camera depths ``z [..., n]``. No depth checks happen here.
    """
    t = np.asarray(t, dtype=float)
    omega = np.asarray(omega, dtype=float)
    f = np.asarray(f, dtype=float)[..., None]
    R = rodrigues(omega)
    p = a @ np.swapaxes(R, -1, -2) + t[..., None, :]
    z = p[..., 2]
    zs = np.where(np.abs(z) < DEPTH_EPS, DEPTH_EPS, z)
    inv_z = 1.0 / zs
    u = p[..., 0] * inv_z
    v = p[..., 1] * inv_z
    r = np.stack([f * u - b[..., 0], f * v - b[..., 1]], axis=-1)
    if not jac:
        return r, None, z
    # d(b)/d(p) = f/z * [[1, 0, -u], [0, 1, -v]]
    fz = f * inv_z
    dproj = np.zeros(p.shape[:-1] + (2, 3))
    dproj[..., 0, 0] = fz
    dproj[..., 0, 2] = -fz * u
    dproj[..., 1, 1] = fz
    dproj[..., 1, 2] = -fz * v
    dR = rodrigues_grad(omega)  # [..., k, 3, 3]
    # dp/dw_k = dR_k a, arranged as [..., n, 3, k]
    dp_dw = np.moveaxis(a[..., None, :, :] @ np.swapaxes(dR, -1, -2), -3, -1)
    J = np.empty(p.shape[:-1] + (2, 6))
    J[..., :3] = dproj
    J[..., 3:] = dproj @ dp_dw
    return r, J, z


@dataclass(frozen=True, eq=False)
class Rotation:
    """Axis-angle rotation ``omega = theta * s``; wrapped to ``theta <= pi``."""

    omega: np.ndarray

    def __post_init__(self):
        w = canonical_omega(np.asarray(self.omega, dtype=float).reshape(3))
        w.setflags(write=False)
        object.__setattr__(self, "omega", w)

    @property
    def angle(self):
        return float(np.linalg.norm(self.omega))

    @property
    def axis(self):
        th = self.angle
        return self.omega / th if th > 0 else np.array([0.0, 0.0, 1.0])

    @classmethod
    def from_axis_angle(cls, axis, theta):
        axis = np.asarray(axis, dtype=float)
        return cls(theta * axis / np.linalg.norm(axis))

    @classmethod
    def from_matrix(cls, R):
        """Inverse Rodrigues map (log of a rotation matrix)."""
        R = np.asarray(R, dtype=float)
        cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
        theta = np.arccos(cos_t)
        vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if theta < 1e-6:
            return cls(0.5 * vee)
        if np.pi - theta < 1e-4:
            # near pi the antisymmetric part vanishes; take the axis from R + I
            B = (R + np.eye(3)) / 2.0
            k = int(np.argmax(np.diag(B)))
            axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
            if axis @ vee < 0:
                axis = -axis
            return cls(theta * axis / np.linalg.norm(axis))
        return cls(theta / (2.0 * np.sin(theta)) * vee)

    def matrix(self):
        return rotation_matrix(self)

    def __eq__(self, other):
        return isinstance(other, Rotation) and np.array_equal(self.omega, other.omega)

    def __repr__(self):
        return f"Rotation(omega={self.omega.tolist()})"


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera transform: ``p = R(rot) a + t``."""

    t: np.ndarray
    rot: Rotation

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "t", t)
        if not isinstance(self.rot, Rotation):
            object.__setattr__(self, "rot", Rotation(self.rot))
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(self.rot.omega))):
            raise ValueError("pose components must be finite")

    @property
    def omega(self):
        return self.rot.omega

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), Rotation(np.zeros(3)))

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:3], Rotation(v[3:6]))

    def vector(self):
        """The 6-vector ``(t, omega)`` in Jacobian column order."""
        return np.concatenate([self.t, self.omega])

    def __eq__(self, other):
        return (isinstance(other, Pose) and np.array_equal(self.t, other.t)
                and self.rot == other.rot)

    def __repr__(self):
        return f"Pose(t={self.t.tolist()}, omega={self.omega.tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float

    def __post_init__(self):
        if not self.f > 0:
            raise NonPositiveFocal(f"focal length must be positive, got {self.f}")

    def matrix(self):
        return np.diag([self.f, self.f, 1.0])


class Correspondence(NamedTuple):
    a: np.ndarray
    b: np.ndarray


def rotation_matrix(rot):
    """3x3 rotation matrix of a ``Rotation`` (or raw axis-angle vector)."""
    omega = rot.omega if isinstance(rot, Rotation) else np.asarray(rot, dtype=float)
    return rodrigues(omega)


def rotation_distance(r1, r2):
    """Angle in radians of ``R1 R2^T``; accepts ``Rotation`` objects or matrices."""
    R1 = r1.matrix() if isinstance(r1, Rotation) else np.asarray(r1, dtype=float)
    R2 = r2.matrix() if isinstance(r2, Rotation) else np.asarray(r2, dtype=float)
    return float(rotation_angle_between(R1, R2))


def translation_error(estimate, truth):
    return float(np.linalg.norm(estimate.t - truth.t))


def rotation_error(estimate, truth):
    return rotation_distance(estimate.rot, truth.rot)


def _check_depths(z):
    bad = np.flatnonzero(np.abs(z) < DEPTH_EPS)
    if bad.size:
        raise DegenerateDepth(int(bad[0]), float(z[bad[0]]))


def project(pose, intrinsics, a):
    """Image point of world point ``a`` under ``pose``; raises ``DegenerateDepth``."""
    a = np.asarray(a, dtype=float).reshape(1, 3)
    r, _, z = reprojection(pose.t, pose.omega, intrinsics.f, a, np.zeros((1, 2)), jac=False)
    _check_depths(z)
    return r[0]


def project_all(pose, intrinsics, a):
    """Vectorised ``project`` over ``a[n, 3]``."""
    a = np.asarray(a, dtype=float)
    r, _, z = reprojection(pose.t, pose.omega, intrinsics.f, a, np.zeros((len(a), 2)), jac=False)
    _check_depths(z)
    return r


def _arrays(corrs):
    if hasattr(corrs, "a") and hasattr(corrs, "b") and not isinstance(corrs, Correspondence):
        return np.asarray(corrs.a, dtype=float), np.asarray(corrs.b, dtype=float)
    a = np.array([c[0] for c in corrs], dtype=float).reshape(-1, 3)
    b = np.array([c[1] for c in corrs], dtype=float).reshape(-1, 2)
    return a, b


def residuals(pose, intrinsics, corrs):
    """Stacked ``C(a_i) - b_i`` as a ``2n`` vector, input order preserved.

    ``corrs`` is a list of ``Correspondence`` (or anything with ``.a``/``.b`` arrays).
    """
    a, b = _arrays(corrs)
    r, _, z = reprojection(pose.t, pose.omega, intrinsics.f, a, b, jac=False)
    _check_depths(z)
    return r.reshape(-1)


def jacobian(pose, intrinsics, corrs):
    """Analytic ``2n x 6`` Jacobian of ``residuals`` w.r.t. ``(t, omega)``."""
    a, b = _arrays(corrs)
    _, J, z = reprojection(pose.t, pose.omega, intrinsics.f, a, b)
    _check_depths(z)
    return J.reshape(-1, 6)
