"""Gaussian voxel maps: the correspondence structure for voxelized GICP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .pointcloud import PointCloud
from .se3 import Pose

KEY_BITS = _kernels.KEY_BITS
KEY_OFFSET = _kernels.KEY_OFFSET


class VoxelRangeError(ValueError):
    """A point falls outside the packable voxel coordinate range."""


@dataclass(frozen=True, eq=False)
class GaussianVoxel:
    mean: np.ndarray
    covariance: np.ndarray
    count: int


def voxel_coords(points: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / resolution).astype(np.int64)


def pack_keys(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if np.any(np.abs(coords) >= KEY_OFFSET):
        raise VoxelRangeError(
            f"voxel coordinates exceed +/-{KEY_OFFSET - 1} cells; reduce extent or increase resolution"
        )
    c = coords + KEY_OFFSET
    return (c[:, 0] << (2 * KEY_BITS)) | (c[:, 1] << KEY_BITS) | c[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << KEY_BITS) - 1
    return np.stack(
        [(keys >> (2 * KEY_BITS)) & mask, (keys >> KEY_BITS) & mask, keys & mask], axis=1
    ) - KEY_OFFSET


class GaussianVoxelMap:
    """Sparse voxel grid of aggregated point distributions.

    Voxels are stored in arrays sorted by packed 64-bit key; lookups go
    through an open-addressing hash table over those keys.
    """

    def __init__(self, resolution: float, keys, means, covariances, counts):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self.keys = np.ascontiguousarray(keys, dtype=np.int64)
        self.means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
        self.covariances = np.ascontiguousarray(covariances, dtype=np.float64).reshape(-1, 3, 3)
        self.counts = np.ascontiguousarray(counts, dtype=np.int64)
        for a in (self.keys, self.means, self.covariances, self.counts):
            a.flags.writeable = False
        self._table = _kernels.build_hash_table(self.keys)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def total_points(self) -> int:
        return int(self.counts.sum())

    def coords(self) -> np.ndarray:
        return unpack_keys(self.keys)

    def lookup(self, point: np.ndarray) -> Optional[GaussianVoxel]:
        """The voxel containing ``point``, or ``None``.

        Only the owning cell is consulted; the lower cell owns a shared face.
        """
        idx = self.lookup_indices(np.asarray(point, dtype=float).reshape(1, 3))[0]
        if idx < 0:
            return None
        return GaussianVoxel(self.means[idx], self.covariances[idx], int(self.counts[idx]))

    def lookup_indices(self, points: np.ndarray, pose: Optional[Pose] = None) -> np.ndarray:
        """Voxel index per point (after applying ``pose``), -1 where empty."""
        pose = pose or Pose()
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        tkeys, trows, shift = self._table
        return _kernels.voxel_correspondences(pts, pose.R, pose.t, tkeys, trows, shift, self.resolution)


def build_voxelmap(cloud: PointCloud, resolution: float) -> GaussianVoxelMap:
    """Aggregate the Gaussian points of ``cloud`` into voxels of side ``resolution``.

    Voxel mean is the average of point means; voxel covariance merges the
    point distributions: ``(sum C_k + sum (mu_k - mean)(mu_k - mean)^T) / n``.
    Points are sorted by (voxel, coordinates) before summation, so the result
    does not depend on input order.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if not cloud.has_covariances:
        raise ValueError("voxel map construction needs per-point covariances")
    if len(cloud) == 0:
        return GaussianVoxelMap(resolution, [], np.zeros((0, 3)), np.zeros((0, 3, 3)), [])

    pts = cloud.points
    keys = pack_keys(voxel_coords(pts, resolution))
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], keys))
    keys = keys[order]
    pts = pts[order]
    covs = cloud.covariances[order]

    starts = np.flatnonzero(np.concatenate([[True], keys[1:] != keys[:-1]]))
    counts = np.diff(np.append(starts, len(keys)))
    ukeys = keys[starts]

    means = np.add.reduceat(pts, starts, axis=0) / counts[:, None]
    dev = pts - np.repeat(means, counts, axis=0)
    spread = np.einsum("ni,nj->nij", dev, dev)
    voxel_covs = (np.add.reduceat(covs, starts, axis=0) + np.add.reduceat(spread, starts, axis=0))
    voxel_covs /= counts[:, None, None]
    voxel_covs = 0.5 * (voxel_covs + np.transpose(voxel_covs, (0, 2, 1)))
    return GaussianVoxelMap(resolution, ukeys, means, voxel_covs, counts)


def overlap_rate(cloud: PointCloud | np.ndarray, pose_rel: Pose, voxelmap: GaussianVoxelMap) -> float:
    """Fraction of points that land in a populated voxel after ``pose_rel``.

    ``pose_rel`` maps the cloud's frame into the voxel map's frame.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(points) == 0:
        raise ValueError("overlap of an empty cloud is undefined")
    hits = voxelmap.lookup_indices(points, pose_rel) >= 0
    return float(np.count_nonzero(hits)) / len(points)
