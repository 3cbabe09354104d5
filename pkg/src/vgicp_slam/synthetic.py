"""Deterministic synthetic LiDAR sequences for desk-scale verification.

The world is a ground plane plus yaw-rotated boxes (some of them long and
thin, acting as walls) scattered beside the trajectory. Scans are ray cast
from ground-truth poses with a spinning multi-beam model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .se3 import Pose, compose, rot_z, se3_exp

SENSOR_HEIGHT = 1.8


@dataclass
class SyntheticSceneSpec:
    shape: str = "circle"  # line | circle | figure-eight
    frames: int = 100
    radius: float = 50.0  # circle radius / figure-eight half width
    step: float = 2.0  # frame spacing on a line [m]
    beams: int = 16
    points_per_scan: int = 4096
    max_range: float = 40.0
    min_elevation_deg: float = -20.0
    max_elevation_deg: float = 8.0
    noise_sigma: float = 0.02  # range noise [m]
    drift: list[float] = field(default_factory=lambda: [0.0] * 6)  # per-frame twist bias (rot, trans)
    box_density: float = 0.25  # boxes per meter of path
    seed: int = 0

    def __post_init__(self):
        if self.shape not in ("line", "circle", "figure-eight"):
            raise ValueError(f"unknown trajectory shape {self.shape!r}")
        if self.frames < 2:
            raise ValueError("need at least two frames")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be nonnegative")
        self.drift = [float(x) for x in self.drift]
        if len(self.drift) != 6:
            raise ValueError("drift must be a 6-vector twist")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        if "drift_yaw_deg" in d:
            drift = [0.0] * 6
            drift[2] = np.radians(float(d.pop("drift_yaw_deg")))
            d["drift"] = drift
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSequence:
    scans: list[np.ndarray]  # sensor-frame (N, 3) points
    ground_truth: list[Pose]
    odometry: list[Pose]
    boxes: np.ndarray  # (B, 7): center xyz, half extents xyz, yaw


def _path_samples(spec: SyntheticSceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Positions (n, 2) and headings (n,) equally spaced along the path."""
    n = spec.frames
    if spec.shape == "line":
        s = np.arange(n) * spec.step
        return np.stack([s, np.zeros(n)], axis=1), np.zeros(n)
    if spec.shape == "circle":
        a = 2.0 * np.pi * np.arange(n) / n
        xy = spec.radius * np.stack([np.sin(a), 1.0 - np.cos(a)], axis=1)
        return xy, a
    # lemniscate of Gerono, resampled by arc length
    u = np.linspace(0.0, 2.0 * np.pi, 20001)
    dense = spec.radius * np.stack([np.sin(u), np.sin(u) * np.cos(u)], axis=1)
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = arc[-1] * np.arange(n) / n
    xy = np.stack([np.interp(targets, arc, dense[:, 0]), np.interp(targets, arc, dense[:, 1])], axis=1)
    du = np.interp(targets, arc, u)
    dx = np.cos(du)
    dy = np.cos(2.0 * du)
    return xy, np.arctan2(dy, dx)


def ground_truth_poses(spec: SyntheticSceneSpec) -> list[Pose]:
    xy, heading = _path_samples(spec)
    return [Pose(rot_z(h), [p[0], p[1], SENSOR_HEIGHT]) for p, h in zip(xy, heading)]


def _dense_path(spec: SyntheticSceneSpec) -> np.ndarray:
    dense = SyntheticSceneSpec(**{**spec.to_dict(), "frames": max(spec.frames * 20, 400)})
    xy, _ = _path_samples(dense)
    if spec.shape == "line":
        xy = xy[xy[:, 0] <= (spec.frames - 1) * spec.step + 1e-9]
    return xy


def make_world(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    path = _dense_path(spec)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    length = float(seg.sum()) + (2.0 * spec.max_range if spec.shape == "line" else 0.0)
    count = max(8, int(spec.box_density * length))
    if spec.shape == "line":
        lo = path.min(axis=0) - [spec.max_range, 0.0]
        hi = path.max(axis=0) + [spec.max_range, 0.0]
    else:
        lo = path.min(axis=0)
        hi = path.max(axis=0)
    boxes = []
    attempts = 0
    while len(boxes) < count and attempts < count * 50:
        attempts += 1
        if spec.shape == "line":
            c = np.array([rng.uniform(lo[0], hi[0]), 0.0])
        else:
            c = path[rng.integers(len(path))].copy()
        side = rng.choice([-1.0, 1.0])
        c = c + rng.normal(size=2) * 3.0
        wall = rng.uniform() < 0.25
        # every obstacle is at least 2 m thick: opposite faces never share a
        # coarse voxel when the obstacle is seen from both sides
        if wall:
            half = np.array([rng.uniform(3.0, 8.0), rng.uniform(1.0, 1.3), rng.uniform(1.0, 2.5)])
        else:
            half = np.array([rng.uniform(1.0, 2.2), rng.uniform(1.0, 2.2), rng.uniform(0.5, 2.0)])
        yaw = rng.uniform(-np.pi, np.pi)
        offset = rng.uniform(4.0, 14.0)
        if spec.shape == "line":
            c[1] = side * offset
        else:
            # push away from the path along a random direction
            d = rng.normal(size=2)
            c = c + d / np.linalg.norm(d) * offset
        # keep a clear corridor around the trajectory
        corners = np.array([[sx * half[0], sy * half[1]] for sx in (-1, 1) for sy in (-1, 1)])
        Rz = rot_z(yaw)[:2, :2]
        foot = c + corners @ Rz.T
        probe = np.concatenate([foot, [c]], axis=0)
        d = np.min(np.linalg.norm(path[None, :, :] - probe[:, None, :], axis=2))
        reach = np.max(half[:2])
        if d < 2.5 or np.min(np.linalg.norm(path - c, axis=1)) < reach + 2.5:
            continue
        boxes.append([c[0], c[1], half[2], *half, yaw])
    return np.array(boxes, dtype=float).reshape(-1, 7)


def scan_directions(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    per_beam = max(1, spec.points_per_scan // spec.beams)
    elev = np.radians(np.linspace(spec.min_elevation_deg, spec.max_elevation_deg, spec.beams))
    az = 2.0 * np.pi * (np.arange(per_beam) + rng.uniform()) / per_beam
    E, A = np.meshgrid(elev, az, indexing="ij")
    E, A = E.ravel(), A.ravel()
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)


def ray_cast(origin: np.ndarray, dirs: np.ndarray, boxes: np.ndarray, max_range: float) -> np.ndarray:
    """Hit distance per ray against ground plane z=0 and boxes, inf on miss."""
    t = np.full(len(dirs), np.inf)
    down = dirs[:, 2] < -1e-9
    t[down] = -origin[2] / dirs[down, 2]
    if len(boxes):
        near = np.linalg.norm(boxes[:, :2] - origin[:2], axis=1) < max_range + np.linalg.norm(boxes[:, 3:5], axis=1)
        for b in boxes[near]:
            c, half, yaw = b[:3], b[3:6], b[6]
            Rt = rot_z(-yaw)
            o = Rt @ (origin - c)
            d = dirs @ Rt.T
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t1 = (-half - o) * inv
                t2 = (half - o) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmin <= tmax) & (tmin > 0)
            t = np.where(hit & (tmin < t), tmin, t)
    t[t > max_range] = np.inf
    return t


def render_scan(pose: Pose, boxes: np.ndarray, spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    dirs_s = scan_directions(spec, rng)
    dirs_w = dirs_s @ pose.R.T
    t = ray_cast(pose.t, dirs_w, boxes, spec.max_range)
    hit = np.isfinite(t)
    r = t[hit]
    if spec.noise_sigma > 0:
        r = r + rng.normal(scale=spec.noise_sigma, size=r.shape)
    return dirs_s[hit] * r[:, None]


def drifted_odometry(ground_truth: list[Pose], drift: np.ndarray) -> list[Pose]:
    bias = se3_exp(np.asarray(drift, dtype=float))
    odom = [ground_truth[0]]
    for a, b in zip(ground_truth[:-1], ground_truth[1:]):
        odom.append(compose(odom[-1], compose(a.inverse() @ b, bias)))
    return odom


def generate_synthetic_sequence(spec: SyntheticSceneSpec) -> SyntheticSequence:
    rng = np.random.default_rng(spec.seed)
    boxes = make_world(spec, rng)
    gt = ground_truth_poses(spec)
    scans = [render_scan(T, boxes, spec, rng) for T in gt]
    return SyntheticSequence(scans, gt, drifted_odometry(gt, spec.drift), boxes)
