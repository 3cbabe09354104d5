"""Rigid-body transforms on SE(3).

Twists are 6-vectors ordered ``(rotation, translation)``. Pose updates use the
right (body-frame) perturbation ``T <- T * exp(delta)`` everywhere in the
package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
# below this angle the Jacobian coefficients switch to their Taylor series
JACOBIAN_SERIES_ANGLE = 1e-2
REORTHONORMALIZE_EVERY = 50


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=float
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]], dtype=float)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation to ``R`` in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def so3_exp(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < SMALL_ANGLE:
        return 0.5 * vee(R - R.T)
    if np.pi - theta < 1e-3:
        # sin(theta) is too small to divide by; recover the axis from the
        # symmetric part, R + R^T = 2I + 2B (w w^T - theta^2 I)
        b = (1.0 - cos_theta) / (theta * theta)
        ww = (0.5 * (R + R.T) - (1.0 - b * theta * theta) * np.eye(3)) / b
        k = int(np.argmax(np.diag(ww)))
        w = ww[:, k] / np.sqrt(max(ww[k, k], 1e-300))
        s = vee(R - R.T)
        if np.dot(w, s) < 0:
            w = -w
        return w
    return theta / (2.0 * np.sin(theta)) * vee(R - R.T)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < JACOBIAN_SERIES_ANGLE:
        t2 = theta * theta
        b = 0.5 - t2 / 24.0
        c = 1.0 / 6.0 - t2 / 120.0
    else:
        b = (1.0 - np.cos(theta)) / (theta * theta)
        c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * W + c * (W @ W)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < JACOBIAN_SERIES_ANGLE:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0
    else:
        c = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (
            2.0 * theta * np.sin(theta)
        )
    return np.eye(3) - 0.5 * W + c * (W @ W)


def _se3_q_matrix(omega: np.ndarray, v: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    P = skew(omega)
    V = skew(v)
    if theta < JACOBIAN_SERIES_ANGLE:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta * theta + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    PV = P @ V
    VP = V @ P
    PVP = PV @ P
    return (
        0.5 * V
        + c1 * (PV + VP + PVP)
        + c2 * (P @ PV + VP @ P - 3.0 * PVP)
        + c3 * (PVP @ P + P @ PVP)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    omega, v = xi[:3], xi[3:]
    J = so3_left_jacobian(omega)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _se3_q_matrix(omega, v)
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    omega, v = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(omega)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ _se3_q_matrix(omega, v) @ Jinv
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``.

    ``updates`` counts manifold retractions since the last
    re-orthonormalization of ``R``.
    """

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    updates: int = 0

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def act(self, points: np.ndarray) -> np.ndarray:
        """Apply to a single 3-vector or an ``(N, 3)`` array."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def adjoint(self) -> np.ndarray:
        out = np.zeros((6, 6))
        out[:3, :3] = self.R
        out[3:, 3:] = self.R
        out[3:, :3] = skew(self.t) @ self.R
        return out

    def retract(self, delta: np.ndarray) -> "Pose":
        """``self * exp(delta)``, re-orthonormalizing periodically."""
        out = compose(self, se3_exp(delta))
        n = self.updates + 1
        if n >= REORTHONORMALIZE_EVERY:
            return Pose(orthonormalize(out.R), out.t, 0)
        return Pose(out.R, out.t, n)

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(so3_log(self.R)))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=atol)
            and np.allclose(self.t, other.t, atol=atol)
        )

    def __repr__(self) -> str:
        rv = so3_log(self.R)
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    return Pose(a.R @ b.R, a.R @ b.t + a.t)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def between(a: Pose, b: Pose) -> Pose:
    """``a^-1 * b``."""
    return Pose(a.R.T @ b.R, a.R.T @ (b.t - a.t))


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    return Pose(so3_exp(omega), so3_left_jacobian(omega) @ v)


def se3_log(T: Pose) -> np.ndarray:
    omega = so3_log(T.R)
    v = so3_left_jacobian_inv(omega) @ T.t
    return np.concatenate([omega, v])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_pose(rng: np.random.Generator, max_angle: float = np.pi, max_trans: float = 10.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(so3_exp(axis * angle), rng.uniform(-max_trans, max_trans, size=3))
