"""Cost factors, robust kernels and conventional GICP scan matching.

Sign convention for every linearized factor: ``b = -1/2 * grad(error)``, so the
Gauss-Newton step solves ``H delta = b`` and the error model around the
linearization point is ``error - 2 b^T delta + delta^T H delta``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .pointcloud import GaussianPoint, PointCloud
from .se3 import Pose, between, se3_log, se3_right_jacobian_inv
from .voxelmap import GaussianVoxel, GaussianVoxelMap

logger = logging.getLogger(__name__)

DEFAULT_LOOP_INFORMATION = np.diag([100.0, 100.0, 100.0, 25.0, 25.0, 25.0])


# ---------------------------------------------------------------------------
# robust kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RobustKernel:
    """``kind`` is one of ``none``, ``huber``, ``shifted_tukey``.

    ``width`` is in squared-error units, ``offset`` and ``delta`` in error
    units (square root of the squared error).
    """

    kind: str = "none"
    width: float = 1.0
    offset: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "huber", "shifted_tukey"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.width <= 0 or self.offset < 0 or self.delta <= 0:
            raise ValueError("kernel parameters out of range")

    @classmethod
    def huber(cls, delta: float) -> "RobustKernel":
        return cls("huber", delta=delta)

    @classmethod
    def shifted_tukey(cls, width: float, offset: float) -> "RobustKernel":
        return cls("shifted_tukey", width=width, offset=offset)


def _tukey_cost_antiderivative(u: np.ndarray, offset: float, w: float) -> np.ndarray:
    # integral of 2 (u + offset) (1 - u^2/w)^2 du
    return (
        u**2 - u**4 / w + u**6 / (3.0 * w * w)
        + 2.0 * offset * (u - 2.0 * u**3 / (3.0 * w) + u**5 / (5.0 * w * w))
    )


def apply_kernel(kernel: RobustKernel, squared_error):
    """IRLS weight in [0, 1] and robustified cost for a squared error.

    The cost is the integral of the weight over the squared error, so the
    weight is its derivative and IRLS steps are consistent with it.
    """
    s = np.maximum(np.asarray(squared_error, dtype=float), 0.0)
    x = np.sqrt(s)
    if kernel.kind == "none":
        return np.ones_like(s)[()], s[()]
    if kernel.kind == "huber":
        d = kernel.delta
        inlier = x <= d
        weight = np.where(inlier, 1.0, d / np.maximum(x, 1e-300))
        cost = np.where(inlier, s, 2.0 * d * x - d * d)
        return weight[()], cost[()]
    w, off = kernel.width, kernel.offset
    r = np.sqrt(w)
    u = x - off
    weight = np.maximum(0.0, 1.0 - u * u / w) ** 2
    lo = _tukey_cost_antiderivative(np.clip(-off, -r, r), off, w)
    cost = _tukey_cost_antiderivative(np.clip(u, -r, r), off, w) - lo
    return weight[()], cost[()]


# ---------------------------------------------------------------------------
# linearized factors
# ---------------------------------------------------------------------------


@dataclass
class LinearizedFactor:
    i: int
    j: int
    H_ii: np.ndarray
    H_ij: np.ndarray
    H_jj: np.ndarray
    b_i: np.ndarray
    b_j: np.ndarray
    error: float
    inliers: int = 0

    @classmethod
    def zero(cls, i: int, j: int) -> "LinearizedFactor":
        z = np.zeros((6, 6))
        return cls(i, j, z, z.copy(), z.copy(), np.zeros(6), np.zeros(6), 0.0, 0)

    @property
    def H(self) -> np.ndarray:
        out = np.zeros((12, 12))
        out[:6, :6] = self.H_ii
        out[:6, 6:] = self.H_ij
        out[6:, :6] = self.H_ij.T
        out[6:, 6:] = self.H_jj
        return out

    @property
    def b(self) -> np.ndarray:
        return np.concatenate([self.b_i, self.b_j])


def _blocks_from_relative(i, j, T_rel: Pose, H_L, grad_L, error, inliers) -> LinearizedFactor:
    # error depends on T_rel = T_i^-1 T_j only. Right perturbations map to a
    # left perturbation of T_rel through J_i = -I and J_j = Ad(T_rel).
    Ad = T_rel.adjoint()
    H_ii = H_L
    H_ij = -H_L @ Ad
    H_jj = Ad.T @ H_L @ Ad
    b_i = 0.5 * grad_L
    b_j = -0.5 * (Ad.T @ grad_L)
    return LinearizedFactor(
        i, j, 0.5 * (H_ii + H_ii.T), H_ij, 0.5 * (H_jj + H_jj.T), b_i, b_j, float(error), int(inliers)
    )


# ---------------------------------------------------------------------------
# GICP terms
# ---------------------------------------------------------------------------


def gicp_error(p: GaussianPoint, target: GaussianVoxel | GaussianPoint, T: Pose):
    """Distribution-to-distribution error of one correspondence.

    Returns ``(error, d, Omega)`` with ``d = mu' - T mu`` and
    ``Omega = (C' + R C R^T)^-1``. Raises ``np.linalg.LinAlgError`` when the
    combined covariance is singular.
    """
    d = np.asarray(target.mean) - T.act(p.mean)
    combined = np.asarray(target.covariance) + T.R @ p.covariance @ T.R.T
    omega = np.linalg.inv(combined)
    omega = 0.5 * (omega + omega.T)
    return float(d @ omega @ d), d, omega


def _accumulate(source: PointCloud, tgt_means, tgt_covs, corr, T: Pose, with_hessian=True):
    out = _kernels.accumulate_gicp(
        source.points, source.covariances, tgt_means, tgt_covs, corr, T.R, T.t, with_hessian
    )
    error, inliers, skipped = out[0], int(out[1]), int(out[2])
    if skipped:
        logger.warning("%d correspondences skipped: singular combined covariance", skipped)
    return error, inliers, out[3:9].copy(), out[9:45].reshape(6, 6).copy()


@dataclass(eq=False)
class MatchingCostFactor:
    """Voxelized GICP cost between two pose variables.

    Points of ``source_cloud`` (frame of variable ``source``) are looked up
    in ``target_map`` (frame of variable ``target``) through
    ``T_target^-1 T_source``. In the linearized factor ``i`` is the target
    and ``j`` the source.
    """

    target: int
    source: int
    source_cloud: PointCloud
    target_map: GaussianVoxelMap
    overlap_at_creation: float = float("nan")

    def __post_init__(self):
        if self.target == self.source:
            raise ValueError("a factor must connect two distinct variables")
        if len(self.source_cloud) == 0 or len(self.target_map) == 0:
            raise ValueError("matching cost factor needs a nonempty cloud and voxel map")
        if not self.source_cloud.has_covariances:
            raise ValueError("source cloud needs covariances")

    @property
    def keys(self) -> tuple[int, int]:
        return (self.target, self.source)

    def relative(self, poses) -> Pose:
        return between(poses[self.target], poses[self.source])

    def correspondences(self, T_rel: Pose) -> np.ndarray:
        return self.target_map.lookup_indices(self.source_cloud.points, T_rel)

    def error(self, poses) -> float:
        T_rel = self.relative(poses)
        corr = self.correspondences(T_rel)
        m = self.target_map
        return _accumulate(self.source_cloud, m.means, m.covariances, corr, T_rel, False)[0]

    def linearize(self, poses) -> LinearizedFactor:
        return linearize_matching_cost(self, poses[self.target], poses[self.source])


def linearize_matching_cost(factor: MatchingCostFactor, T_i: Pose, T_j: Pose) -> LinearizedFactor:
    """Hessian factor of the voxelized GICP cost at ``(T_i, T_j)``.

    ``T_i`` is the target pose and ``T_j`` the source pose. Correspondences
    are looked up afresh at these poses.
    """
    T_rel = between(T_i, T_j)
    corr = factor.correspondences(T_rel)
    m = factor.target_map
    error, inliers, grad_L, H_L = _accumulate(factor.source_cloud, m.means, m.covariances, corr, T_rel)
    if inliers == 0:
        return LinearizedFactor.zero(factor.target, factor.source)
    return _blocks_from_relative(factor.target, factor.source, T_rel, H_L, grad_L, error, inliers)


# ---------------------------------------------------------------------------
# SE3 relative pose factor
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RelativePoseFactor:
    i: int
    j: int
    measurement: Pose
    information: np.ndarray = field(default_factory=lambda: DEFAULT_LOOP_INFORMATION.copy())
    kernel: RobustKernel = field(default_factory=RobustKernel)
    tag: str = "loop"

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("a factor must connect two distinct variables")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6) or not np.allclose(info, info.T, atol=1e-9):
            raise ValueError("information must be a symmetric 6x6 matrix")
        if np.linalg.eigvalsh(0.5 * (info + info.T)).min() < -1e-9:
            raise ValueError("information must be positive semidefinite")
        self.information = 0.5 * (info + info.T)

    @property
    def keys(self) -> tuple[int, int]:
        return (self.i, self.j)

    def residual(self, T_i: Pose, T_j: Pose) -> np.ndarray:
        return se3_log(self.measurement.inverse() @ between(T_i, T_j))

    def squared_error(self, poses) -> float:
        r = self.residual(poses[self.i], poses[self.j])
        return float(r @ self.information @ r)

    def error(self, poses) -> float:
        return float(apply_kernel(self.kernel, self.squared_error(poses))[1])

    def weight(self, poses) -> float:
        return float(apply_kernel(self.kernel, self.squared_error(poses))[0])

    def linearize(self, poses) -> LinearizedFactor:
        return linearize_relative_pose(self, poses[self.i], poses[self.j])


def relative_pose_jacobians(factor: RelativePoseFactor, T_i: Pose, T_j: Pose):
    """Residual and its Jacobians w.r.t. right perturbations of ``T_i``, ``T_j``."""
    r = factor.residual(T_i, T_j)
    Jr_inv = se3_right_jacobian_inv(r)
    J_i = -Jr_inv @ between(T_j, T_i).adjoint()
    J_j = Jr_inv
    return r, J_i, J_j


def linearize_relative_pose(factor: RelativePoseFactor, T_i: Pose, T_j: Pose) -> LinearizedFactor:
    r, J_i, J_j = relative_pose_jacobians(factor, T_i, T_j)
    info = factor.information
    s = float(r @ info @ r)
    weight, cost = apply_kernel(factor.kernel, s)
    weight = float(weight)
    if weight == 0.0:
        out = LinearizedFactor.zero(factor.i, factor.j)
        out.error = float(cost)
        return out
    wi = weight * info
    return LinearizedFactor(
        factor.i,
        factor.j,
        J_i.T @ wi @ J_i,
        J_i.T @ wi @ J_j,
        J_j.T @ wi @ J_j,
        -J_i.T @ wi @ r,
        -J_j.T @ wi @ r,
        float(cost),
        1,
    )


# ---------------------------------------------------------------------------
# conventional GICP
# ---------------------------------------------------------------------------


@dataclass
class GicpResult:
    pose: Pose
    cost: float
    hessian: np.ndarray
    converged: bool
    iterations: int
    inliers: int
    inlier_fraction: float

    @property
    def mean_error(self) -> float:
        return self.cost / self.inliers if self.inliers else float("inf")


def gicp_align(
    source: PointCloud,
    target: PointCloud,
    initial: Optional[Pose] = None,
    max_iterations: int = 64,
    max_correspondence_distance: float = 2.0,
    tolerance: float = 1e-6,
    min_inlier_fraction: float = 0.05,
    workers: int = 1,
) -> GicpResult:
    """Align ``source`` to ``target`` with nearest-neighbor GICP.

    The returned pose maps source coordinates into the target frame; the
    Hessian is the Gauss-Newton ``J^T W J`` w.r.t. a right perturbation of
    that pose, evaluated at the returned pose.
    """
    if not (source.has_covariances and target.has_covariances):
        raise ValueError("GICP needs covariances on both clouds")
    T = initial if initial is not None else Pose()
    tree = target.kdtree
    n = len(source)

    def associate(pose):
        _, idx = tree.query(
            pose.act(source.points), k=1,
            distance_upper_bound=max_correspondence_distance, workers=workers,
        )
        idx = np.asarray(idx, dtype=np.int64)
        idx[idx >= len(target)] = -1
        return idx

    def evaluate(pose, corr, with_hessian=True):
        err, inl, g_L, H_L = _accumulate(source, target.points, target.covariances, corr, pose, with_hessian)
        Ad = pose.adjoint()
        return err, inl, Ad.T @ g_L, Ad.T @ H_L @ Ad

    converged = False
    lam = 1e-4
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        corr = associate(T)
        err, inl, grad, H = evaluate(T, corr)
        if inl == 0:
            break
        b = -0.5 * grad
        accepted = False
        for _ in range(10):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
            try:
                delta = np.linalg.solve(A, b)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = T.retract(delta)
            new_err = evaluate(candidate, corr, False)[0]
            if new_err <= err:
                T = candidate
                lam = max(lam * 0.1, 1e-10)
                accepted = True
                break
            lam *= 10.0
        if not accepted or np.linalg.norm(delta) < tolerance:
            converged = True
            break

    corr = associate(T)
    err, inl, _, H = evaluate(T, corr)
    fraction = inl / n if n else 0.0
    if inl == 0 or fraction < min_inlier_fraction:
        converged = False
    return GicpResult(T, float(err), 0.5 * (H + H.T), converged, iterations, inl, fraction)


def hessian_covariance(H: np.ndarray, invert: bool = True, floor: float = 1e-6) -> np.ndarray:
    """Covariance (or floored information) from a Gauss-Newton Hessian.

    Eigenvalues below ``floor`` are raised to it, so unconstrained
    directions get a large but finite variance.
    """
    H = np.asarray(H, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (H + H.T))
    vals = np.maximum(vals, floor)
    if invert:
        return (vecs / vals) @ vecs.T
    return (vecs * vals) @ vecs.T
