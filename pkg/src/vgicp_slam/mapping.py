"""Local and global mapping: overlap-driven submaps over a dense factor graph."""

from __future__ import annotations

import logging
import time
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .factors import (
    MatchingCostFactor,
    RelativePoseFactor,
    RobustKernel,
    gicp_align,
)
from .optimizer import MappingGraph, OptimizerReport, optimize
from .pointcloud import PointCloud, estimate_covariances, transform_cloud, voxel_downsample
from .se3 import Pose, between, compose, rot_z
from .voxelmap import GaussianVoxelMap, build_voxelmap, overlap_rate

logger = logging.getLogger(__name__)

EventSink = Callable[[dict], None]


@dataclass(eq=False)
class Frame:
    index: int
    cloud: PointCloud
    voxelmap: Optional[GaussianVoxelMap] = None


@dataclass(eq=False)
class Submap:
    id: int
    cloud: PointCloud
    voxelmap: GaussianVoxelMap
    pose: Pose
    frame_indices: tuple[int, ...]
    frame_poses: tuple[Pose, ...]  # relative to the submap origin, frozen

    def frame_world_poses(self) -> list[Pose]:
        return [compose(self.pose, p) for p in self.frame_poses]


@dataclass(frozen=True)
class LoopCandidate:
    a: int
    b: int
    guess: Pose
    source: str = "proximity"  # proximity | file

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("loop candidate ids must differ")


@dataclass
class LocalDecision:
    kind: str  # skipped | inserted | submap_emitted
    overlap: float = float("nan")
    submap: Optional[Submap] = None
    report: Optional[OptimizerReport] = None


class LocalWindow:
    """Fully connected matching-cost window over recent keyframes."""

    def __init__(self, config: PipelineConfig, executor: Optional[Executor] = None):
        self.config = config
        self.executor = executor
        self.frames: list[Frame] = []
        self.poses: list[Pose] = []
        self.factors: list[MatchingCostFactor] = []

    def __len__(self) -> int:
        return len(self.frames)

    def clear(self):
        self.frames, self.poses, self.factors = [], [], []

    def overlap_to(self, k: int, cloud: PointCloud, pose: Pose) -> float:
        return overlap_rate(cloud, between(self.poses[k], pose), self.frames[k].voxelmap)

    def optimize(self) -> tuple[list[Pose], OptimizerReport]:
        graph = MappingGraph(list(self.poses), list(self.factors), fixed={0})
        return optimize(graph, self.config.optimizer, self.executor)


def local_insert(window: LocalWindow, frame: Frame, pose_guess: Pose, submap_id: int = 0) -> LocalDecision:
    """Offer a preprocessed frame to the local window.

    Frames that barely moved relative to the last keyframe are skipped.
    Otherwise the frame joins the window with factors to every keyframe;
    when the first and last keyframes stop overlapping or the window is
    full, the window is optimized and merged into a submap.
    """
    cfg = window.config.local
    overlap = float("nan")
    if window.frames:
        overlap = window.overlap_to(len(window) - 1, frame.cloud, pose_guess)
        if overlap > cfg.skip_overlap:
            return LocalDecision("skipped", overlap)

    frame.voxelmap = build_voxelmap(frame.cloud, cfg.resolution)
    new = len(window.frames)
    window.frames.append(frame)
    window.poses.append(pose_guess)
    for k in range(new):
        window.factors.append(MatchingCostFactor(k, new, frame.cloud, window.frames[k].voxelmap))

    first_last = window.overlap_to(0, frame.cloud, pose_guess) if new > 0 else 1.0
    if new > 0 and (first_last < cfg.min_overlap or len(window) > cfg.max_frames):
        submap, report = emit_submap(window, submap_id)
        return LocalDecision("submap_emitted", overlap, submap, report)
    return LocalDecision("inserted", overlap)


def emit_submap(window: LocalWindow, submap_id: int) -> tuple[Submap, Optional[OptimizerReport]]:
    report = None
    poses = list(window.poses)
    if len(window) > 1:
        poses, report = window.optimize()
    cfg = window.config
    origin = poses[0]
    internal = tuple(between(origin, p) for p in poses)
    merged = PointCloud.concatenate(
        [transform_cloud(f.cloud, T) for f, T in zip(window.frames, internal)]
    )
    if cfg.preprocess.submap_downsample > 0:
        merged = voxel_downsample(merged, cfg.preprocess.submap_downsample)
    submap = Submap(
        submap_id,
        merged,
        build_voxelmap(merged, cfg.global_.resolution),
        origin,
        tuple(f.index for f in window.frames),
        internal,
    )
    window.clear()
    return submap, report


class GlobalMapper:
    """Submap poses connected by dense matching-cost factors and loop constraints."""

    def __init__(self, config: PipelineConfig, executor: Optional[Executor] = None, events: Optional[EventSink] = None):
        self.config = config
        self.executor = executor
        self.events = events or (lambda rec: None)
        self.submaps: list[Submap] = []
        self.graph = MappingGraph()
        self.edges: list[dict] = []
        self.loop_pairs: set[tuple[int, int]] = set()
        self.reports: list[OptimizerReport] = []

    # ------------------------------------------------------------------
    def global_insert(self, submap: Submap) -> list:
        """Add a submap and a matching-cost factor to every sufficiently
        overlapping past submap."""
        if submap.id != len(self.submaps):
            raise ValueError(f"expected submap id {len(self.submaps)}, got {submap.id}")
        g = self.config.global_
        self.submaps.append(submap)
        self.graph.add_variable(submap.pose)
        created = []
        for past in self.submaps[:-1]:
            T_rel = between(past.pose, submap.pose)
            ov = overlap_rate(submap.cloud, T_rel, past.voxelmap)
            if ov <= g.min_overlap:
                continue
            pairs = [(past, submap)]
            if g.symmetric_factors:
                pairs.append((submap, past))
            for tgt, src in pairs:
                f = MatchingCostFactor(tgt.id, src.id, src.cloud, tgt.voxelmap, overlap_at_creation=ov)
                self.graph.matching_factors.append(f)
                created.append(f)
                self._record_edge(tgt.id, src.id, "matching_cost", ov)
        if submap.id > 0 and not any(f.keys == (submap.id - 1, submap.id) for f in created):
            # keep the chain connected when consecutive submaps do not overlap
            prev = self.submaps[submap.id - 1]
            f = RelativePoseFactor(
                prev.id, submap.id, between(prev.pose, submap.pose),
                np.diag(self.config.loop.information), RobustKernel(), tag="odometry",
            )
            self.graph.relative_factors.append(f)
            created.append(f)
            self._record_edge(prev.id, submap.id, "odometry", float("nan"))
        return created

    def _record_edge(self, a, b, kind, overlap):
        rec = {"event": "factor", "type": kind, "pair": [a, b], "overlap": overlap}
        self.edges.append(rec)
        self.events(rec)

    # ------------------------------------------------------------------
    def optimize(self) -> OptimizerReport:
        if len(self.submaps) < 2:
            return OptimizerReport(termination="single_variable")
        poses, report = optimize(self.graph, self.config.optimizer, self.executor)
        self.set_poses(poses)
        self.reports.append(report)
        self.events({
            "event": "optimize", "submaps": len(self.submaps), "factors": len(self.graph.factors),
            "iterations": report.iterations, "initial_error": report.initial_error,
            "final_error": report.final_error, "termination": report.termination,
            "wall_time": report.wall_time,
        })
        return report

    def set_poses(self, poses: Sequence[Pose]):
        self.graph.poses = list(poses)
        for s, p in zip(self.submaps, poses):
            s.pose = p

    # ------------------------------------------------------------------
    def proximity_loop_candidates(self, radius: float, min_gap: int, involving: Optional[int] = None) -> list[LoopCandidate]:
        out = []
        for b in self.submaps:
            if involving is not None and b.id != involving:
                continue
            for a in self.submaps:
                if b.id - a.id <= min_gap:
                    continue
                if np.linalg.norm(a.pose.t - b.pose.t) < radius:
                    out.append(LoopCandidate(a.id, b.id, between(a.pose, b.pose), "proximity"))
        return out

    def process_loop_candidate(self, cand: LoopCandidate) -> Optional[RelativePoseFactor]:
        """Refine a candidate with GICP and keep it only if every gate passes."""
        n = len(self.submaps)
        if not (0 <= cand.a < n and 0 <= cand.b < n):
            raise ValueError(f"loop candidate {cand.a}-{cand.b} references unknown submaps")
        cfg = self.config
        old, new = self.submaps[cand.a], self.submaps[cand.b]
        res = gicp_align(
            new.cloud, old.cloud, cand.guess,
            max_iterations=cfg.gicp.max_iterations,
            max_correspondence_distance=cfg.gicp.max_correspondence_distance,
            tolerance=cfg.gicp.tolerance,
        )
        ov = overlap_rate(new.cloud, res.pose, old.voxelmap)
        rec = {
            "event": "loop", "pair": [cand.a, cand.b], "source": cand.source,
            "converged": res.converged, "mean_error": res.mean_error, "overlap": ov,
        }
        reason = None
        if not res.converged:
            reason = "not_converged"
        elif res.mean_error > cfg.loop.max_mean_error:
            reason = "mean_error_gate"
        elif ov < cfg.loop.min_overlap:
            reason = "overlap_gate"
        self.loop_pairs.add((cand.a, cand.b))
        if reason is not None:
            rec.update(accepted=False, reason=reason)
            self.events(rec)
            return None
        kernel = RobustKernel.shifted_tukey(cfg.kernel.tukey_width, cfg.kernel.tukey_offset)
        factor = RelativePoseFactor(cand.a, cand.b, res.pose, np.diag(cfg.loop.information), kernel)
        self.graph.relative_factors.append(factor)
        rec.update(accepted=True)
        self.events(rec)
        self._record_edge(cand.a, cand.b, "loop", ov)
        return factor

    # ------------------------------------------------------------------
    def concatenate_map(self, downsample: float = 0.0, poses: Optional[Sequence[Pose]] = None) -> PointCloud:
        poses = poses if poses is not None else [s.pose for s in self.submaps]
        cloud = PointCloud.concatenate([transform_cloud(s.cloud, p) for s, p in zip(self.submaps, poses)])
        if downsample > 0:
            cloud = voxel_downsample(cloud, downsample)
        return cloud


class MappingPipeline:
    """Frame stream -> local windows -> submaps -> global graph."""

    def __init__(
        self,
        config: PipelineConfig,
        executor: Optional[Executor] = None,
        events: Optional[EventSink] = None,
        loop_candidates: Sequence[tuple[int, int, Optional[float]]] = (),
    ):
        self.config = config
        self.executor = executor
        self.event_log: list[dict] = []
        self._sink = events

        self.window = LocalWindow(config, executor)
        self.mapper = GlobalMapper(config, executor, self._emit)
        self.file_candidates = list(loop_candidates)
        self._frame_ref: dict[int, tuple[int, Pose]] = {}  # skipped frame -> (keyframe, relative odom)
        self._odometry: dict[int, Pose] = {}
        self._keyframes: dict[int, Frame] = {}
        self._last_key: Optional[int] = None
        self._prev_cloud: Optional[PointCloud] = None
        self._prev_rel = Pose()
        self._prev_pose = Pose()
        self.frame_count = 0
        self.timings: dict[str, float] = {"preprocess": 0.0, "local": 0.0, "global": 0.0, "loop": 0.0}

    def _emit(self, rec: dict):
        self.event_log.append(rec)
        if self._sink is not None:
            self._sink(rec)

    # ------------------------------------------------------------------
    def preprocess(self, points: np.ndarray) -> PointCloud:
        p = self.config.preprocess
        cloud = PointCloud(points)
        if p.scan_downsample > 0:
            cloud = voxel_downsample(cloud, p.scan_downsample)
        return estimate_covariances(cloud, k=p.k_neighbors, epsilon=p.plane_epsilon)

    def keyframe_estimate(self, index: int) -> Pose:
        for k, f in enumerate(self.window.frames):
            if f.index == index:
                return self.window.poses[k]
        for s in self.mapper.submaps:
            if index in s.frame_indices:
                return compose(s.pose, s.frame_poses[s.frame_indices.index(index)])
        raise KeyError(index)

    def process_frame(self, index: int, points: np.ndarray, odometry: Optional[Pose] = None) -> LocalDecision:
        t0 = time.perf_counter()
        cloud = self.preprocess(points)
        t1 = time.perf_counter()
        self.timings["preprocess"] += t1 - t0

        if odometry is None:
            if self.config.odometry == "file":
                raise ValueError(f"frame {index}: no odometry guess and odometry source is 'file'")
            odometry = self._gicp_odometry(cloud)
        self._odometry[index] = odometry

        if self._last_key is None:
            guess = odometry
        else:
            guess = compose(self.keyframe_estimate(self._last_key), between(self._odometry[self._last_key], odometry))

        decision = local_insert(self.window, Frame(index, cloud), guess, len(self.mapper.submaps))
        self.frame_count += 1
        self.timings["local"] += time.perf_counter() - t1
        self._emit({"event": decision.kind, "frame": index, "overlap": decision.overlap})
        if decision.kind == "skipped":
            self._frame_ref[index] = (self._last_key, between(self._odometry[self._last_key], odometry))
            return decision
        self._keyframes[index] = Frame(index, cloud)
        self._last_key = index
        if decision.submap is not None:
            self._add_submap(decision.submap, decision.report)
        return decision

    def _gicp_odometry(self, cloud: PointCloud) -> Pose:
        if self._prev_cloud is None:
            pose = Pose()
        else:
            res = gicp_align(
                cloud, self._prev_cloud, self._prev_rel,
                max_iterations=self.config.gicp.max_iterations,
                max_correspondence_distance=self.config.gicp.max_correspondence_distance,
            )
            self._prev_rel = res.pose
            pose = compose(self._prev_pose, res.pose)
        self._prev_pose = pose
        self._prev_cloud = cloud
        return pose

    def _add_submap(self, submap: Submap, report: Optional[OptimizerReport]):
        t0 = time.perf_counter()
        self._emit({
            "event": "submap", "id": submap.id, "frames": list(submap.frame_indices),
            "points": len(submap.cloud),
            "local_iterations": report.iterations if report else 0,
        })
        self.mapper.global_insert(submap)
        if self.config.global_.schedule == "incremental":
            self.mapper.optimize()
        t1 = time.perf_counter()
        self.timings["global"] += t1 - t0
        if self.config.loop.enabled:
            accepted = self._run_loop_candidates(submap.id)
            if accepted and self.config.global_.schedule == "incremental":
                self.mapper.optimize()
        self.timings["loop"] += time.perf_counter() - t1

    def _run_loop_candidates(self, newest: int) -> int:
        cands = []
        n = len(self.mapper.submaps)
        pending = []
        for a, b, yaw in self.file_candidates:
            if a < n and b < n:
                guess = (
                    Pose(rot_z(np.radians(yaw)), np.zeros(3)) if yaw is not None
                    else between(self.mapper.submaps[a].pose, self.mapper.submaps[b].pose)
                )
                cands.append(LoopCandidate(a, b, guess, "file"))
            else:
                pending.append((a, b, yaw))
        self.file_candidates = pending
        if self.config.loop.proximity:
            cands += self.mapper.proximity_loop_candidates(
                self.config.loop.radius, self.config.loop.min_id_gap, involving=newest
            )
        accepted = 0
        for c in cands:
            if (c.a, c.b) in self.mapper.loop_pairs:
                continue
            if self.mapper.process_loop_candidate(c) is not None:
                accepted += 1
        return accepted

    def finish(self) -> Optional[OptimizerReport]:
        """Flush the open window and run the final global optimization."""
        if len(self.window):
            submap, report = emit_submap(self.window, len(self.mapper.submaps))
            self._add_submap(submap, report)
        t0 = time.perf_counter()
        report = self.mapper.optimize()
        self.timings["global"] += time.perf_counter() - t0
        return report

    # ------------------------------------------------------------------
    def trajectory(self, submap_poses: Optional[Sequence[Pose]] = None) -> list[tuple[int, Pose]]:
        """World pose of every processed frame, skipped frames included.

        ``submap_poses`` substitutes alternative submap estimates (e.g. from
        an ablation run) for the mapper's current ones.
        """
        out = {}
        for k, s in enumerate(self.mapper.submaps):
            origin = s.pose if submap_poses is None else submap_poses[k]
            for idx, T in zip(s.frame_indices, s.frame_poses):
                out[idx] = compose(origin, T)
        for k, f in enumerate(self.window.frames):
            out[f.index] = self.window.poses[k]
        for idx, (key, rel) in self._frame_ref.items():
            if key in out:
                out[idx] = compose(out[key], rel)
        return sorted(out.items())

    def odometry_map(self) -> PointCloud:
        """Keyframes placed at their raw odometry poses (pre-optimization map)."""
        return PointCloud.concatenate(
            [transform_cloud(f.cloud, self._odometry[i]) for i, f in sorted(self._keyframes.items())]
        )
