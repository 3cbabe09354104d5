"""Point clouds with per-point Gaussian covariances."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .se3 import Pose

PLANE_EPSILON = 1e-3
DEFAULT_K = 10


class TooFewPointsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianPoint:
    mean: np.ndarray
    covariance: np.ndarray


class PointCloud:
    """Immutable ``(N, 3)`` means with ``(N, 3, 3)`` covariances.

    Covariances may be absent for raw scans; registration code requires them.
    """

    def __init__(
        self,
        points: np.ndarray,
        covariances: Optional[np.ndarray] = None,
        intensity: Optional[np.ndarray] = None,
    ):
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("point cloud contains NaN or Inf coordinates")
        if covariances is not None:
            covariances = np.ascontiguousarray(covariances, dtype=np.float64).reshape(-1, 3, 3)
            if len(covariances) != len(points):
                raise ValueError("covariance count does not match point count")
            covariances.flags.writeable = False
        if intensity is not None:
            intensity = np.asarray(intensity, dtype=np.float64).reshape(-1)
            if len(intensity) != len(points):
                raise ValueError("intensity count does not match point count")
            intensity.flags.writeable = False
        points.flags.writeable = False
        self.points = points
        self.covariances = covariances
        self.intensity = intensity

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, k: int) -> GaussianPoint:
        cov = self.covariances[k] if self.covariances is not None else np.zeros((3, 3))
        return GaussianPoint(self.points[k], cov)

    @property
    def has_covariances(self) -> bool:
        return self.covariances is not None

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.points)

    def subset(self, indices: np.ndarray) -> "PointCloud":
        indices = np.asarray(indices)
        return PointCloud(
            self.points[indices],
            None if self.covariances is None else self.covariances[indices],
            None if self.intensity is None else self.intensity[indices],
        )

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        points = np.concatenate([c.points for c in clouds])
        covs = None
        if all(c.has_covariances for c in clouds):
            covs = np.concatenate([c.covariances for c in clouds])
        intensity = None
        if all(c.intensity is not None for c in clouds):
            intensity = np.concatenate([c.intensity for c in clouds])
        return PointCloud(points, covs, intensity)


def regularize_covariances(covs: np.ndarray, epsilon: float = PLANE_EPSILON) -> np.ndarray:
    """Replace eigenvalues with ``(epsilon, 1, 1)`` keeping the eigenvectors."""
    _, vecs = np.linalg.eigh(covs)
    vals = np.array([epsilon, 1.0, 1.0])
    out = (vecs * vals) @ np.transpose(vecs, (0, 2, 1))
    return 0.5 * (out + np.transpose(out, (0, 2, 1)))


def estimate_covariances(
    points: np.ndarray | PointCloud,
    k: int = DEFAULT_K,
    epsilon: float = PLANE_EPSILON,
    workers: int = 1,
) -> PointCloud:
    """Attach regularized k-nearest-neighbor covariances to every point.

    The neighborhood of a point includes the point itself.
    """
    if isinstance(points, PointCloud):
        cloud = points
    else:
        cloud = PointCloud(points)
    n = len(cloud)
    if k < 4:
        raise ValueError(f"k must be at least 4, got {k}")
    if n <= k:
        raise TooFewPointsError(f"need more than k={k} points, got {n}")

    _, idx = cloud.kdtree.query(cloud.points, k=k, workers=workers)
    nbrs = cloud.points[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    covs = np.transpose(centered, (0, 2, 1)) @ centered / k
    return PointCloud(cloud.points, regularize_covariances(covs, epsilon), cloud.intensity)


def nearest_neighbors(cloud: PointCloud, query: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbor indices, ties broken by lower index."""
    if k > len(cloud):
        raise ValueError(f"k={k} exceeds cloud size {len(cloud)}")
    query = np.asarray(query, dtype=float).reshape(3)
    dist, idx = cloud.kdtree.query(query, k=k)
    dist = np.atleast_1d(dist)
    idx = np.atleast_1d(idx)
    # the tree's order among equidistant points is arbitrary; gather every
    # point tied with the k-th distance and re-sort
    kth = dist[-1]
    cand = cloud.kdtree.query_ball_point(query, kth * (1.0 + 1e-12) + 1e-300)
    cand = np.unique(np.concatenate([np.asarray(cand, dtype=np.int64), idx]))
    d = np.linalg.norm(cloud.points[cand] - query, axis=1)
    order = np.lexsort((cand, d))
    return cand[order[:k]]


def transform_cloud(cloud: PointCloud, T: Pose) -> PointCloud:
    points = T.act(cloud.points)
    covs = None
    if cloud.covariances is not None:
        covs = np.einsum("ij,njk,lk->nil", T.R, cloud.covariances, T.R)
    return PointCloud(points, covs, cloud.intensity)


def voxel_downsample(cloud: PointCloud, resolution: float) -> PointCloud:
    """Keep one point per voxel: the one closest to the voxel centroid.

    Selecting existing points (rather than averaging) keeps covariances
    meaningful. Deterministic regardless of input order up to exact ties.
    """
    if resolution <= 0 or len(cloud) == 0:
        return cloud
    coords = np.floor(cloud.points / resolution).astype(np.int64)
    _, inverse, counts = np.unique(coords, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    d = np.linalg.norm(cloud.points - centroids[inverse], axis=1)
    order = np.lexsort((np.arange(len(cloud)), d, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order[1:]] != inverse[order[:-1]]
    keep = np.sort(order[first])
    return cloud.subset(keep)
