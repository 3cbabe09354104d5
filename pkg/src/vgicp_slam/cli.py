"""Command-line entry point: run the mapping pipeline and export artifacts."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import yaml

from . import io
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .evaluation import (
    Trajectory,
    absolute_trajectory_error,
    compute_mme,
    compute_rte,
    end_pose_error,
)
from .mapping import MappingPipeline
from .se3 import Pose
from .synthetic import SyntheticSceneSpec, generate_synthetic_sequence

logger = logging.getLogger("vgicp_slam")


class PipelineError(RuntimeError):
    """Abort with the frame/submap context in which a module failed."""

    def __init__(self, stage: str, cause: BaseException, frame: Optional[int] = None, submap: Optional[int] = None):
        where = [f"stage={stage}"]
        if frame is not None:
            where.append(f"frame={frame}")
        if submap is not None:
            where.append(f"submap={submap}")
        super().__init__(f"{' '.join(where)}: {type(cause).__name__}: {cause}")
        self.stage, self.frame, self.submap, self.cause = stage, frame, submap, cause

    def diagnostic(self) -> dict:
        return {
            "error": type(self.cause).__name__, "message": str(self.cause),
            "stage": self.stage, "frame": self.frame, "submap": self.submap,
        }


@dataclass
class PipelineInputs:
    """Scans are produced lazily as ``(N, 3)`` sensor-frame arrays."""

    scans: Callable[[], Iterable[np.ndarray]]
    num_frames: int
    odometry: Optional[list[Pose]] = None
    ground_truth: Optional[list[Pose]] = None
    loop_candidates: list[tuple[int, int, Optional[float]]] = field(default_factory=list)


@dataclass
class RunResult:
    status: int
    pipeline: Optional[MappingPipeline]
    trajectory: Optional[Trajectory]
    metrics: dict
    artifacts: dict[str, Path]


def synthetic_inputs(spec: SyntheticSceneSpec) -> PipelineInputs:
    seq = generate_synthetic_sequence(spec)
    return PipelineInputs(lambda: iter(seq.scans), len(seq.scans), seq.odometry, seq.ground_truth)


def kitti_inputs(scan_dir, odometry_path=None, loops_path=None, ground_truth_path=None) -> PipelineInputs:
    paths = io.list_scans(scan_dir)
    if not paths:
        raise ConfigError(f"no .bin scans in {scan_dir}")
    odom = io.read_trajectory_kitti(odometry_path).poses if odometry_path else None
    if odom is not None and len(odom) < len(paths):
        raise ConfigError(f"odometry file has {len(odom)} poses for {len(paths)} scans")
    gt = io.read_trajectory_kitti(ground_truth_path).poses if ground_truth_path else None
    loops = io.read_loop_candidates(loops_path) if loops_path else []
    return PipelineInputs(lambda: (io.load_kitti_scan(p)[0] for p in paths), len(paths), odom, gt, loops)


def run_pipeline(
    config: PipelineConfig,
    inputs: PipelineInputs,
    out_dir: Optional[str | Path] = None,
    evaluate_map: bool = True,
    plots: bool = False,
) -> RunResult:
    """preprocess -> local mapping -> global mapping -> loops -> final
    optimization -> exports. Files are written only after the run completes."""
    config.validate()
    if config.odometry == "file" and inputs.odometry is None:
        raise ConfigError("odometry source is 'file' but no odometry poses were given")
    if inputs.odometry is not None and len(inputs.odometry) < inputs.num_frames:
        raise ConfigError("fewer odometry poses than frames")

    executor = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    events: list[dict] = []
    traces: list[dict] = []
    t0 = time.perf_counter()
    try:
        pipe = MappingPipeline(config, executor, events.append, inputs.loop_candidates)
        _attach_trace(pipe, traces)
        frame = None
        scans = iter(inputs.scans())
        try:
            for frame in range(inputs.num_frames):
                try:
                    pts = next(scans)
                except StopIteration:
                    break
                except Exception as exc:
                    raise PipelineError("ingest", exc, frame=frame, submap=len(pipe.mapper.submaps)) from exc
                odom = inputs.odometry[frame] if config.odometry == "file" else None
                pipe.process_frame(frame, pts, odom)
            frame = None
            pipe.finish()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError("mapping", exc, frame=frame, submap=len(pipe.mapper.submaps)) from exc
        elapsed = time.perf_counter() - t0
    finally:
        if executor is not None:
            executor.shutdown()

    traj = Trajectory.from_pairs(pipe.trajectory())
    metrics = {
        "frames": pipe.frame_count, "submaps": len(pipe.mapper.submaps),
        "factors": len(pipe.mapper.graph.factors), "wall_time": elapsed,
        "fps": pipe.frame_count / elapsed if elapsed > 0 else float("inf"),
        "timings": dict(pipe.timings),
        "loops_accepted": sum(1 for e in events if e["event"] == "loop" and e.get("accepted")),
        "loops_rejected": sum(1 for e in events if e["event"] == "loop" and not e.get("accepted")),
    }
    entropy = None
    if inputs.ground_truth is not None:
        gt = Trajectory.from_poses(inputs.ground_truth[: inputs.num_frames])
        rte = compute_rte(traj, gt)
        metrics["rte"] = {"rotational_deg_per_100m": rte.rotational, "translational_m_per_100m": rte.translational,
                          "per_length": rte.records()}
        metrics["ate"] = absolute_trajectory_error(traj, gt)
        metrics["end_translation"], metrics["end_rotation_deg"] = end_pose_error(traj, gt)
        if inputs.odometry is not None:
            odom = Trajectory.from_poses(inputs.odometry[: inputs.num_frames])
            metrics["odometry_ate"] = absolute_trajectory_error(odom, gt)
            metrics["odometry_end_translation"], metrics["odometry_end_rotation_deg"] = end_pose_error(odom, gt)
    if evaluate_map:
        ev = config.evaluation
        try:
            m_after, h = compute_mme(pipe.mapper.concatenate_map(), ev.mme_radius, ev.mme_min_neighbors, ev.mme_stride)
            metrics["mme_after"] = m_after
            if config.odometry == "file":
                metrics["mme_before"] = compute_mme(pipe.odometry_map(), ev.mme_radius, ev.mme_min_neighbors, ev.mme_stride)[0]
            entropy = h
        except ValueError as exc:
            logger.warning("map entropy not evaluated: %s", exc)

    artifacts = {}
    if out_dir is not None:
        artifacts = _export(Path(out_dir), config, pipe, traj, inputs, metrics, events, traces, entropy)
        if plots:
            from .plots import render_plots

            for p in render_plots(out_dir):
                artifacts[p.stem + "_plot"] = p
    return RunResult(0, pipe, traj, metrics, artifacts)


def _attach_trace(pipe: MappingPipeline, traces: list):
    mapper = pipe.mapper
    original = mapper.optimize

    def traced():
        report = original()
        run = len(mapper.reports)
        for rec in report.trace:
            traces.append({"run": run, **rec})
        return report

    mapper.optimize = traced


def _export(out: Path, config, pipe, traj, inputs, metrics, events, traces, entropy) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "trajectory": out / "trajectory.txt", "frame_indices": out / "trajectory_frames.txt",
        "map": out / "map.ply", "graph": out / "graph.jsonl", "events": out / "events.jsonl",
        "trace": out / "optimizer_trace.jsonl", "metrics": out / "metrics.json", "config": out / "config.yaml",
    }
    io.write_trajectory_kitti(traj, paths["trajectory"])
    with io.atomic_write(paths["frame_indices"]) as fh:
        fh.write("".join(f"{i}\n" for i in traj.indices))
    io.export_map_ply(pipe.mapper.concatenate_map(), paths["map"])
    io.export_graph(pipe.mapper, paths["graph"])
    io.write_jsonl(events, paths["events"])
    io.write_jsonl(traces, paths["trace"])
    with io.atomic_write(paths["config"]) as fh:
        fh.write(dump_config(config))
    if inputs.ground_truth is not None:
        paths["ground_truth"] = out / "ground_truth.txt"
        io.write_trajectory_kitti(inputs.ground_truth[: inputs.num_frames], paths["ground_truth"])
        rte = metrics.get("rte", {}).get("per_length", [])
        paths["rte"] = out / "rte.jsonl"
        io.write_jsonl(rte, paths["rte"])
    if inputs.odometry is not None:
        paths["odometry"] = out / "odometry.txt"
        io.write_trajectory_kitti(inputs.odometry[: inputs.num_frames], paths["odometry"])
    if entropy is not None:
        paths["entropy"] = out / "entropy.npz"
        pts = pipe.mapper.concatenate_map().points
        ok = np.isfinite(entropy)
        with io.atomic_write(paths["entropy"], "wb") as fh:
            np.savez(fh, points=pts[ok], entropy=entropy[ok])
    # timing fields are excluded so repeated runs export identical files
    stable = {k: v for k, v in metrics.items() if k not in ("wall_time", "fps", "timings")}
    io.write_json(stable, paths["metrics"])
    paths["timing"] = out / "timing.json"
    io.write_json({k: metrics[k] for k in ("wall_time", "fps", "timings")}, paths["timing"])
    return paths


# ---------------------------------------------------------------------------


def _parse_override(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def _synthetic_spec(arg: str) -> SyntheticSceneSpec:
    if arg in ("line", "circle", "figure-eight"):
        return SyntheticSceneSpec(shape=arg)
    path = Path(arg)
    if not path.exists():
        raise ConfigError(f"synthetic spec {arg!r} is neither a shape name nor a file")
    with open(path) as fh:
        return SyntheticSceneSpec.from_dict(yaml.safe_load(fh) or {})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vgicp-slam", description=__doc__)
    p.add_argument("--config", help="YAML configuration file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scans", help="directory of KITTI .bin scans")
    src.add_argument("--synthetic", help="synthetic scene: shape name or YAML spec file")
    p.add_argument("--odometry", help="KITTI pose file with per-frame odometry guesses")
    p.add_argument("--ground-truth", help="KITTI pose file for evaluation")
    p.add_argument("--loops", help="loop candidate file: 'a b [yaw_deg]' per line")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--set", action="append", type=_parse_override, default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set global.resolution=0.5")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--no-map-metrics", action="store_true", help="skip map entropy evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
        overrides = dict(args.set)
        if args.deterministic is not None:
            overrides["deterministic"] = args.deterministic
        if args.threads is not None:
            overrides["threads"] = args.threads
        if overrides:
            config = config.override(overrides)
        if args.synthetic:
            inputs = synthetic_inputs(_synthetic_spec(args.synthetic))
        else:
            if config.odometry == "file" and not args.odometry:
                raise ConfigError("--odometry is required when odometry source is 'file'")
            for flag in ("odometry", "loops", "ground_truth"):
                path = getattr(args, flag)
                if path and not Path(path).exists():
                    raise ConfigError(f"--{flag.replace('_', '-')} file {path} does not exist")
            inputs = kitti_inputs(args.scans, args.odometry, args.loops, args.ground_truth)
        if args.synthetic and args.loops:
            inputs.loop_candidates = io.read_loop_candidates(args.loops)
        result = run_pipeline(config, inputs, args.out_dir, not args.no_map_metrics, not args.no_plots)
    except (ConfigError, FileNotFoundError, io.ScanFormatError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "stage": "setup"}), file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(json.dumps(exc.diagnostic()), file=sys.stderr)
        return 1
    m = result.metrics
    summary = f"{m['frames']} frames, {m['submaps']} submaps, {m['factors']} factors, {m['fps']:.1f} frames/s"
    if "ate" in m:
        summary += f", ATE {m['ate']:.3f} m, end error {m['end_translation']:.3f} m / {m['end_rotation_deg']:.3f} deg"
    logger.info(summary)
    logger.info("artifacts written to %s", args.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
