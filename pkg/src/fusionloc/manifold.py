"""SO(3) / SE(3) group operations.

Rotations are plain 3x3 numpy arrays. Twists are 6-vectors ordered
``(rho, phi)``: translational part first, rotational part second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

SMALL_ANGLE = 1e-8
# Jacobian series switch; the closed forms lose precision well before 1e-8.
_JAC_SMALL = 1e-4
_ORTHO_TOL = 1e-12

Rotation = NDArray[np.float64]
_I3 = np.eye(3)


def hat(v: ArrayLike) -> NDArray[np.float64]:
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def orthonormalize(R: Rotation) -> Rotation:
    """Project onto SO(3) if the matrix has drifted beyond tolerance."""
    err = R.T @ R - _I3
    if np.sqrt(np.einsum("ij,ij->", err, err)) <= _ORTHO_TOL:
        return R
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def so3_exp(phi: ArrayLike) -> Rotation:
    """Rodrigues' formula; second-order series below the small-angle threshold."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = hat(phi)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return _I3 + a * K + b * (K @ K)


def _canonical_axis_sign(axis: NDArray[np.float64]) -> NDArray[np.float64]:
    for c in axis:
        if abs(c) > 1e-15:
            return axis if c > 0 else -axis
    return axis


def so3_log(R: Rotation) -> NDArray[np.float64]:
    """Principal-branch rotation vector, ``|phi| <= pi``.

    At exactly ``pi`` the sign of the axis is ambiguous; the axis whose first
    nonzero component is positive is returned.
    """
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - R.T)
    s = np.sqrt(float(w @ w))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if np.pi - theta > 1e-3:
        return w * (theta / s)
    # near pi: recover the axis from the symmetric part, sign from w
    S = 0.5 * (R + R.T) - c * np.eye(3)
    S /= 1.0 - c
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.sqrt(S[k, k])
    axis /= np.linalg.norm(axis)
    if s > 1e-15:
        if axis @ w < 0:
            axis = -axis
    else:
        axis = _canonical_axis_sign(axis)
    return theta * axis


def so3_right_jacobian(phi: ArrayLike) -> NDArray[np.float64]:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = hat(phi)
    if theta < _JAC_SMALL:
        a = 0.5 - theta2 / 24.0
        b = 1.0 / 6.0 - theta2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta2
        b = (theta - np.sin(theta)) / (theta2 * theta)
    return _I3 - a * K + b * (K @ K)


def so3_left_jacobian(phi: ArrayLike) -> NDArray[np.float64]:
    return so3_right_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi: ArrayLike) -> NDArray[np.float64]:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = hat(phi)
    if theta < _JAC_SMALL:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        c = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return _I3 + 0.5 * K + c * (K @ K)


def so3_left_jacobian_inv(phi: ArrayLike) -> NDArray[np.float64]:
    return so3_right_jacobian_inv(-np.asarray(phi, dtype=float))


@dataclass(frozen=True)
class Pose:
    """Rigid transform; ``act(p) = rotation @ p + translation``."""

    rotation: Rotation
    translation: NDArray[np.float64]

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: ArrayLike) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3].copy(), T[:3, 3].copy())

    def matrix(self) -> NDArray[np.float64]:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: Pose) -> Pose:
        return compose(self, other)

    def inverse(self) -> Pose:
        return inverse(self)

    def act(self, p: ArrayLike) -> NDArray[np.float64]:
        return act(self, p)


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(
        orthonormalize(a.rotation @ b.rotation),
        a.rotation @ b.translation + a.translation,
    )


def inverse(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt.copy(), -Rt @ a.translation)


def act(a: Pose, p: ArrayLike) -> NDArray[np.float64]:
    return a.rotation @ np.asarray(p, dtype=float) + a.translation


def se3_exp(xi: ArrayLike) -> Pose:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(T: Pose) -> NDArray[np.float64]:
    phi = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(phi) @ T.translation
    return np.concatenate([rho, phi])


def _se3_q_left(rho: NDArray[np.float64], phi: NDArray[np.float64]) -> NDArray[np.float64]:
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    P = hat(phi)
    Rh = hat(rho)
    if theta < _JAC_SMALL:
        c1 = 1.0 / 6.0 - theta2 / 120.0
        c2 = 1.0 / 24.0 - theta2 / 720.0
        c3 = 1.0 / 120.0 - theta2 / 2520.0
    else:
        st, ct = np.sin(theta), np.cos(theta)
        c1 = (theta - st) / (theta2 * theta)
        c2 = (theta2 + 2.0 * ct - 2.0) / (2.0 * theta2 * theta2)
        c3 = (2.0 * theta - 3.0 * st + theta * ct) / (2.0 * theta2 * theta2 * theta)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian(xi: ArrayLike) -> NDArray[np.float64]:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = _se3_q_left(rho, phi)
    return out


def se3_right_jacobian(xi: ArrayLike) -> NDArray[np.float64]:
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi: ArrayLike) -> NDArray[np.float64]:
    """Inverse of the SE(3) right Jacobian, in ``(rho, phi)`` ordering."""
    xi = -np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ _se3_q_left(rho, phi) @ Jinv
    return out


def adjoint(T: Pose) -> NDArray[np.float64]:
    """6x6 adjoint in ``(rho, phi)`` ordering: ``T exp(xi) = exp(Ad xi) T``."""
    R, t = T.rotation, T.translation
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[:3, 3:] = hat(t) @ R
    return out


# -- batched variants (leading axis indexes elements) ------------------------------------


def hat_batch(v: NDArray[np.float64]) -> NDArray[np.float64]:
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1], out[..., 0, 2] = -z, y
    out[..., 1, 0], out[..., 1, 2] = z, -x
    out[..., 2, 0], out[..., 2, 1] = -y, x
    return out


def _coeffs(theta2, small, series, closed):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(small, series(theta2), closed(theta2))


def so3_exp_batch(phi: NDArray[np.float64]) -> NDArray[np.float64]:
    """:func:`so3_exp` over an ``(m, 3)`` array."""
    theta2 = np.einsum("ij,ij->i", phi, phi)
    small = np.sqrt(theta2) < SMALL_ANGLE
    a = _coeffs(theta2, small, lambda t2: 1.0 - t2 / 6.0, lambda t2: np.sin(np.sqrt(t2)) / np.sqrt(t2))
    b = _coeffs(theta2, small, lambda t2: 0.5 - t2 / 24.0, lambda t2: (1.0 - np.cos(np.sqrt(t2))) / t2)
    K = hat_batch(phi)
    return _I3 + a[:, None, None] * K + b[:, None, None] * (K @ K)


def so3_log_batch(R: NDArray[np.float64]) -> NDArray[np.float64]:
    """:func:`so3_log` over an ``(m, 3, 3)`` array; near-pi elements use the scalar path."""
    w = 0.5 * np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    s = np.linalg.norm(w, axis=1)
    c = 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0)
    theta = np.arctan2(s, c)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(theta < SMALL_ANGLE, 1.0 + theta * theta / 6.0, theta / s)
    out = w * scale[:, None]
    for k in np.flatnonzero(np.pi - theta <= 1e-3):
        out[k] = so3_log(R[k])
    return out


def so3_right_jacobian_batch(phi: NDArray[np.float64]) -> NDArray[np.float64]:
    theta2 = np.einsum("ij,ij->i", phi, phi)
    small = np.sqrt(theta2) < _JAC_SMALL
    a = _coeffs(theta2, small, lambda t2: 0.5 - t2 / 24.0, lambda t2: (1.0 - np.cos(np.sqrt(t2))) / t2)
    b = _coeffs(
        theta2,
        small,
        lambda t2: 1.0 / 6.0 - t2 / 120.0,
        lambda t2: (np.sqrt(t2) - np.sin(np.sqrt(t2))) / (t2 * np.sqrt(t2)),
    )
    K = hat_batch(phi)
    return _I3 - a[:, None, None] * K + b[:, None, None] * (K @ K)


def so3_right_jacobian_inv_batch(phi: NDArray[np.float64]) -> NDArray[np.float64]:
    theta2 = np.einsum("ij,ij->i", phi, phi)
    small = np.sqrt(theta2) < _JAC_SMALL

    def closed(t2):
        t = np.sqrt(t2)
        return 1.0 / t2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t))

    c = _coeffs(theta2, small, lambda t2: 1.0 / 12.0 + t2 / 720.0, closed)
    K = hat_batch(phi)
    return _I3 + 0.5 * K + c[:, None, None] * (K @ K)


def so3_left_jacobian_batch(phi: NDArray[np.float64]) -> NDArray[np.float64]:
    return so3_right_jacobian_batch(-phi)
