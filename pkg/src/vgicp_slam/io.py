"""Dataset ingestion and artifact export (KITTI scans/poses, PLY, JSONL)."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .evaluation import Trajectory
from .pointcloud import PointCloud
from .se3 import Pose

logger = logging.getLogger(__name__)

KITTI_RECORD = 16


class ScanFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} at byte offset {offset}")
        self.path = str(path)
        self.offset = offset


@contextlib.contextmanager
def atomic_write(path: str | Path, mode: str = "w") -> Iterator:
    """Write to a temporary sibling and rename into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# KITTI
# ---------------------------------------------------------------------------


def load_kitti_scan(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a KITTI velodyne ``.bin``: little-endian float32 (x, y, z, intensity).

    Returns ``(points (N, 3) float64, intensity (N,) float64)``.
    """
    data = Path(path).read_bytes()
    usable = len(data) - len(data) % KITTI_RECORD
    if usable != len(data):
        raise ScanFormatError(path, usable, f"truncated record ({len(data) % KITTI_RECORD} trailing bytes)")
    if not data:
        logger.warning("%s: empty scan", path)
        return np.zeros((0, 3)), np.zeros(0)
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(rec).all(axis=1)
    if bad.any():
        first = int(np.nonzero(bad)[0][0])
        raise ScanFormatError(path, first * KITTI_RECORD, "non-finite value")
    return rec[:, :3].copy(), rec[:, 3].copy()


def write_kitti_scan(path: str | Path, points: np.ndarray, intensity: Optional[np.ndarray] = None):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    inten = np.zeros(len(pts)) if intensity is None else np.asarray(intensity, dtype=float)
    rec = np.column_stack([pts, inten]).astype("<f4")
    with atomic_write(path, "wb") as fh:
        fh.write(rec.tobytes())


def _fmt(x: float) -> str:
    # shortest round-trip representation in positional notation
    return np.format_float_positional(float(x) + 0.0, unique=True, trim="-")


def format_pose_line(pose: Pose) -> str:
    return " ".join(_fmt(v) for v in pose.matrix()[:3, :4].ravel())


def write_trajectory_kitti(traj: Trajectory | Sequence[Pose], path: str | Path):
    poses = traj.poses if isinstance(traj, Trajectory) else list(traj)
    with atomic_write(path) as fh:
        for p in poses:
            fh.write(format_pose_line(p) + "\n")


def read_trajectory_kitti(path: str | Path) -> Trajectory:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) != 12:
                raise ValueError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
            M = np.eye(4)
            M[:3, :4] = np.array(vals, dtype=float).reshape(3, 4)
            poses.append(Pose.from_matrix(M))
    return Trajectory.from_poses(poses)


def read_loop_candidates(path: str | Path) -> list[tuple[int, int, Optional[float]]]:
    """Lines ``a b [yaw_deg]``; ``#`` starts a comment."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected 'a b [yaw_deg]'")
            a, b = int(vals[0]), int(vals[1])
            if a == b:
                raise ValueError(f"{path}:{lineno}: loop candidate pairs a submap with itself")
            out.append((a, b, float(vals[2]) if len(vals) == 3 else None))
    return out


def list_scans(directory: str | Path) -> list[Path]:
    return sorted(Path(directory).glob("*.bin"))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def export_map_ply(cloud: PointCloud | np.ndarray, path: str | Path, intensity: Optional[np.ndarray] = None):
    """Binary little-endian PLY with float32 x/y/z (+ intensity)."""
    if isinstance(cloud, PointCloud):
        pts = cloud.points
        if intensity is None:
            intensity = cloud.intensity
    else:
        pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("refusing to export an empty map")
    names = ["x", "y", "z"] + (["intensity"] if intensity is not None else [])
    arr = np.empty(len(pts), dtype=[(n, "<f4") for n in names])
    arr["x"], arr["y"], arr["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if intensity is not None:
        arr["intensity"] = intensity
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}"]
    header += [f"property float {n}" for n in names] + ["end_header"]
    with atomic_write(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# line-delimited records
# ---------------------------------------------------------------------------


def _clean(v):
    if isinstance(v, float):
        return v if math.isfinite(v) else None
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def dumps_record(rec: dict) -> str:
    """Deterministic JSON line; non-finite floats become null."""
    return json.dumps(_clean(rec), sort_keys=True, allow_nan=False)


def write_jsonl(records: Iterable[dict], path: str | Path):
    with atomic_write(path) as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(data: dict, path: str | Path):
    with atomic_write(path) as fh:
        fh.write(json.dumps(_clean(data), sort_keys=True, indent=2, allow_nan=False) + "\n")


def graph_records(mapper) -> list[dict]:
    """Nodes (submap id, translation) then edges (pair, type, overlap, error)."""
    poses = mapper.graph.poses
    out = [{"kind": "node", "id": s.id, "t": s.pose.t, "frames": list(s.frame_indices)} for s in mapper.submaps]
    for f in mapper.graph.matching_factors:
        out.append({
            "kind": "edge", "pair": list(f.keys), "type": "matching_cost",
            "overlap": f.overlap_at_creation, "error": f.error(poses),
        })
    overlaps = {tuple(e["pair"]): e["overlap"] for e in mapper.edges if e["type"] != "matching_cost"}
    for f in mapper.graph.relative_factors:
        out.append({
            "kind": "edge", "pair": list(f.keys), "type": f.tag,
            "overlap": overlaps.get(tuple(f.keys)), "error": f.error(poses),
        })
    return out


def export_graph(mapper, path: str | Path):
    write_jsonl(graph_records(mapper), path)
