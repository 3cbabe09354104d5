"""Trajectory and map-quality metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .factors import MatchingCostFactor, RelativePoseFactor, RobustKernel, gicp_align, hessian_covariance
from .optimizer import MappingGraph
from .pointcloud import PointCloud
from .se3 import Pose, between

logger = logging.getLogger(__name__)

RTE_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


@dataclass
class Trajectory:
    indices: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if len(self.indices) != len(self.poses):
            raise ValueError("indices and poses differ in length")
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("trajectory indices must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, Pose]]) -> "Trajectory":
        pairs = list(pairs)
        return cls([i for i, _ in pairs], [p for _, p in pairs])

    @classmethod
    def from_poses(cls, poses: Sequence[Pose]) -> "Trajectory":
        return cls(np.arange(len(poses)), list(poses))

    def __len__(self) -> int:
        return len(self.poses)

    def translations(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def transformed(self, T: Pose) -> "Trajectory":
        return Trajectory(self.indices.copy(), [T @ p for p in self.poses])

    def subset(self, indices: Sequence[int]) -> "Trajectory":
        lookup = {int(i): p for i, p in zip(self.indices, self.poses)}
        missing = [i for i in indices if int(i) not in lookup]
        if missing:
            raise KeyError(f"trajectory lacks frames {missing[:5]}")
        return Trajectory(indices, [lookup[int(i)] for i in indices])


def _common(estimate: Trajectory, ground_truth: Trajectory) -> tuple[Trajectory, Trajectory]:
    if np.array_equal(estimate.indices, ground_truth.indices):
        return estimate, ground_truth
    shared = np.intersect1d(estimate.indices, ground_truth.indices)
    if len(shared) == 0:
        raise ValueError("trajectories share no frame indices")
    return estimate.subset(shared), ground_truth.subset(shared)


# ---------------------------------------------------------------------------
# relative trajectory error
# ---------------------------------------------------------------------------


@dataclass
class RteResult:
    rotational: float  # deg / 100 m
    translational: float  # m / 100 m
    per_length: dict[int, dict] = field(default_factory=dict)
    segments: int = 0

    @property
    def empty(self) -> bool:
        return self.segments == 0

    def records(self) -> list[dict]:
        return [{"length": ell, **v} for ell, v in sorted(self.per_length.items())]


def path_distances(poses: Sequence[Pose]) -> np.ndarray:
    t = np.array([p.t for p in poses]).reshape(-1, 3)
    step = np.linalg.norm(np.diff(t, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(step)])


def compute_rte(estimate: Trajectory, ground_truth: Trajectory, lengths: Sequence[int] = RTE_LENGTHS) -> RteResult:
    """KITTI development-kit relative error, stride one frame.

    For every start frame and length, the segment ends at the first frame
    whose ground-truth path distance exceeds the start by the length. Errors
    are divided by the nominal length and averaged over all segments.
    """
    est, gt = _common(estimate, ground_truth)
    dist = path_distances(gt.poses)
    rot, trans, per = [], [], {}
    for ell in lengths:
        r_l, t_l = [], []
        for first in range(len(gt)):
            beyond = np.nonzero(dist > dist[first] + ell)[0]
            if len(beyond) == 0:
                break  # distances are monotone: later starts fail too
            last = beyond[0]
            d_gt = between(gt.poses[first], gt.poses[last])
            d_est = between(est.poses[first], est.poses[last])
            err = between(d_est, d_gt)
            r_l.append(err.rotation_angle() / ell)
            t_l.append(np.linalg.norm(err.t) / ell)
        if r_l:
            per[int(ell)] = {
                "rotational": float(np.degrees(np.mean(r_l)) * 100.0),
                "translational": float(np.mean(t_l) * 100.0),
                "segments": len(r_l),
            }
            rot += r_l
            trans += t_l
    if not rot:
        logger.warning("trajectory shorter than %s m: relative error undefined", min(lengths))
        return RteResult(float("nan"), float("nan"), {}, 0)
    return RteResult(float(np.degrees(np.mean(rot)) * 100.0), float(np.mean(trans) * 100.0), per, len(rot))


def absolute_trajectory_error(estimate: Trajectory, ground_truth: Trajectory) -> float:
    """RMS translation difference, no alignment (both share the gauge)."""
    est, gt = _common(estimate, ground_truth)
    d = est.translations() - gt.translations()
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def end_pose_error(estimate: Trajectory, ground_truth: Trajectory) -> tuple[float, float]:
    """(meters, degrees) between the last common poses."""
    est, gt = _common(estimate, ground_truth)
    err = between(gt.poses[-1], est.poses[-1])
    return float(np.linalg.norm(err.t)), float(np.degrees(err.rotation_angle()))


# ---------------------------------------------------------------------------
# mean map entropy
# ---------------------------------------------------------------------------


def compute_mme(
    cloud: PointCloud | np.ndarray,
    radius: float = 0.5,
    min_neighbors: int = 5,
    stride: int = 1,
) -> tuple[float, np.ndarray]:
    """Mean of per-point entropies ``0.5 ln((2 pi e)^3 det S)``.

    ``S`` is the sample covariance of the map points within ``radius`` of
    each evaluated point (the point itself included). Points with fewer than
    ``min_neighbors`` neighbors, or a singular neighborhood, get NaN and are
    left out of the mean. ``stride`` evaluates every n-th point only.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty map")
    tree = cKDTree(pts)
    query = np.arange(0, len(pts), max(1, int(stride)))
    entropy = np.full(len(pts), np.nan)
    chunk = 20000
    for s in range(0, len(query), chunk):
        q = query[s : s + chunk]
        nbrs = tree.query_ball_point(pts[q], radius)
        counts = np.fromiter((len(n) for n in nbrs), dtype=np.int64, count=len(q))
        ok = counts >= min_neighbors
        if not ok.any():
            continue
        flat = np.fromiter((i for k in np.nonzero(ok)[0] for i in nbrs[k]), dtype=np.int64)
        c = counts[ok]
        starts = np.concatenate([[0], np.cumsum(c)[:-1]])
        P = pts[flat]
        mean = np.add.reduceat(P, starts, axis=0) / c[:, None]
        outer = np.add.reduceat(P[:, :, None] * P[:, None, :], starts, axis=0)
        cov = (outer - c[:, None, None] * mean[:, :, None] * mean[:, None, :]) / (c[:, None, None] - 1)
        sign, logdet = np.linalg.slogdet(cov)
        h = 0.5 * (3.0 * np.log(2.0 * np.pi * np.e) + logdet)
        h[sign <= 0] = np.nan
        entropy[q[ok]] = h
    valid = entropy[np.isfinite(entropy)]
    if len(valid) == 0:
        raise ValueError(f"no point has {min_neighbors} neighbors within {radius} m")
    return float(valid.mean()), entropy


def local_map_mme(
    clouds: Sequence[PointCloud],
    poses: Sequence[Pose],
    every: int = 10,
    extent: float = 10.0,
    radius: float = 0.5,
    min_neighbors: int = 5,
) -> list[dict]:
    """Per-local-map MME records: every ``every``-th frame, aggregate the
    frames whose positions lie within ``extent`` meters of it."""
    centers = np.array([p.t for p in poses])
    out = []
    for k in range(0, len(poses), every):
        near = np.nonzero(np.linalg.norm(centers - centers[k], axis=1) <= extent)[0]
        pts = np.concatenate([poses[i].act(clouds[i].points) for i in near])
        try:
            m, ent = compute_mme(pts, radius, min_neighbors)
        except ValueError:
            continue
        out.append({"frame": int(k), "frames": len(near), "mme": m, "evaluated": int(np.isfinite(ent).sum())})
    return out


# ---------------------------------------------------------------------------
# ablation: matching-cost factors -> SE3 relative pose factors
# ---------------------------------------------------------------------------


@dataclass
class SwapRecord:
    keys: tuple[int, int]
    converged: bool
    inlier_fraction: float
    mean_error: float


def ablation_swap(
    graph: MappingGraph,
    clouds: Sequence[PointCloud],
    huber_delta: float = 1.0,
    max_correspondence_distance: float = 2.0,
    max_iterations: int = 64,
    records: Optional[list] = None,
) -> MappingGraph:
    """Replace every matching-cost factor by a GICP relative-pose factor.

    Each pair is aligned with conventional GICP seeded at the current
    estimate; the result's Hessian becomes the information matrix and a
    Huber kernel is attached. Relative-pose factors already in the graph
    are kept. Pairs whose alignment does not converge keep the unconverged
    measurement and are listed in ``records``.
    """
    if len(clouds) != len(graph.poses):
        raise ValueError("need one point cloud per graph variable")
    swapped = []
    for f in graph.matching_factors:
        i, j = f.keys
        res = gicp_align(
            clouds[j], clouds[i], between(graph.poses[i], graph.poses[j]),
            max_iterations=max_iterations, max_correspondence_distance=max_correspondence_distance,
        )
        info = hessian_covariance(res.hessian, invert=False)
        swapped.append(RelativePoseFactor(i, j, res.pose, info, RobustKernel.huber(huber_delta), tag="gicp"))
        rec = SwapRecord((i, j), res.converged, res.inlier_fraction, res.mean_error)
        if records is not None:
            records.append(rec)
        if not res.converged:
            logger.info("ablation: pair %s did not converge (inliers %.3f)", (i, j), res.inlier_fraction)
    return MappingGraph(
        list(graph.poses), [], swapped + list(graph.relative_factors),
        set(graph.fixed) if graph.fixed is not None else None,
    )


def matching_pairs_overlap(graph: MappingGraph) -> list[float]:
    """Creation-time overlap of each matching-cost factor."""
    return [f.overlap_at_creation for f in graph.matching_factors if isinstance(f, MatchingCostFactor)]
