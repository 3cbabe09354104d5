import json
import logging
import struct

import numpy as np
import pytest
import yaml
from plyfile import PlyData

from vgicp_slam import cli, io
from vgicp_slam.config import ConfigError, PipelineConfig, dump_config, load_config
from vgicp_slam.pointcloud import PointCloud
from vgicp_slam.se3 import Pose, random_pose
from vgicp_slam.synthetic import SyntheticSceneSpec


# --- KITTI scans -------------------------------------------------------------


def test_single_record_scan(tmp_path):
    p = tmp_path / "one.bin"
    p.write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    pts, inten = io.load_kitti_scan(p)
    assert pts.shape == (1, 3) and pts.dtype == np.float64
    assert np.array_equal(pts[0], [1, 2, 3]) and inten[0] == 0.5


def test_empty_scan_warns(tmp_path, caplog):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    with caplog.at_level(logging.WARNING):
        pts, inten = io.load_kitti_scan(p)
    assert pts.shape == (0, 3) and inten.shape == (0,)
    assert "empty" in caplog.text


def test_truncated_scan_reports_offset(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(struct.pack("<4f", 1, 2, 3, 4) + b"\x00")
    with pytest.raises(io.ScanFormatError) as exc:
        io.load_kitti_scan(p)
    assert exc.value.offset == 16 and "16" in str(exc.value)


def test_non_finite_scan_rejected(tmp_path):
    p = tmp_path / "nan.bin"
    p.write_bytes(struct.pack("<8f", 0, 0, 0, 0, 1, float("nan"), 0, 0))
    with pytest.raises(io.ScanFormatError) as exc:
        io.load_kitti_scan(p)
    assert exc.value.offset == 16


def test_scan_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(100, 3)).astype(np.float32).astype(float)
    io.write_kitti_scan(tmp_path / "s.bin", pts, np.arange(100.0))
    back, inten = io.load_kitti_scan(tmp_path / "s.bin")
    assert np.array_equal(back, pts) and np.array_equal(inten, np.arange(100.0))


# --- poses -------------------------------------------------------------------


def test_identity_pose_line():
    assert io.format_pose_line(Pose()) == "1 0 0 0 0 1 0 0 0 0 1 0"


def test_pose_line_layout():
    T = Pose(np.eye(3), [1.5, -2.0, 3.25])
    vals = [float(v) for v in io.format_pose_line(T).split()]
    assert len(vals) == 12 and vals[3] == 1.5 and vals[7] == -2.0 and vals[11] == 3.25


def test_trajectory_roundtrip(tmp_path, rng):
    poses = [random_pose(rng) for _ in range(20)]
    io.write_trajectory_kitti(poses, tmp_path / "t.txt")
    back = io.read_trajectory_kitti(tmp_path / "t.txt")
    for a, b in zip(poses, back.poses):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-9


def test_trajectory_rejects_malformed_line(tmp_path):
    (tmp_path / "t.txt").write_text("1 0 0\n")
    with pytest.raises(ValueError):
        io.read_trajectory_kitti(tmp_path / "t.txt")


# --- PLY ---------------------------------------------------------------------


def test_ply_single_point(tmp_path):
    io.export_map_ply(np.array([[1.0, 2.0, 3.0]]), tmp_path / "m.ply")
    ply = PlyData.read(str(tmp_path / "m.ply"))
    v = ply["vertex"]
    assert v.count == 1 and (v["x"][0], v["y"][0], v["z"][0]) == (1.0, 2.0, 3.0)
    assert not ply.text and ply.byte_order == "<"


def test_ply_roundtrip_with_intensity(tmp_path, rng):
    pts = rng.normal(size=(500, 3))
    inten = rng.uniform(size=500)
    io.export_map_ply(PointCloud(pts, intensity=inten), tmp_path / "m.ply")
    v = PlyData.read(str(tmp_path / "m.ply"))["vertex"]
    assert np.allclose(np.column_stack([v["x"], v["y"], v["z"]]), pts, atol=1e-6)
    assert np.allclose(v["intensity"], inten, atol=1e-7)


def test_ply_refuses_empty_map(tmp_path):
    with pytest.raises(ValueError):
        io.export_map_ply(np.zeros((0, 3)), tmp_path / "m.ply")
    assert not (tmp_path / "m.ply").exists()


# --- atomic writes and records ---------------------------------------------


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")
    with pytest.raises(RuntimeError):
        with io.atomic_write(target) as fh:
            fh.write("partial")
            raise RuntimeError("boom")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_jsonl_roundtrip_and_nan(tmp_path):
    recs = [{"b": 1, "a": float("nan"), "v": np.array([1.0, 2.0])}, {"x": np.int64(3)}]
    io.write_jsonl(recs, tmp_path / "r.jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert lines[0] == '{"a": null, "b": 1, "v": [1.0, 2.0]}'
    assert io.read_jsonl(tmp_path / "r.jsonl")[1] == {"x": 3}


def test_loop_candidate_file(tmp_path):
    p = tmp_path / "loops.txt"
    p.write_text("# a b yaw\n0 7\n2 9 12.5  # revisit\n\n")
    assert io.read_loop_candidates(p) == [(0, 7, None), (2, 9, 12.5)]
    p.write_text("3 3\n")
    with pytest.raises(ValueError):
        io.read_loop_candidates(p)
    p.write_text("1\n")
    with pytest.raises(ValueError):
        io.read_loop_candidates(p)


# --- configuration -----------------------------------------------------------


def test_config_roundtrip_is_idempotent(tmp_path):
    cfg = PipelineConfig().override({"global.resolution": 0.75, "local.max_frames": 7})
    text = dump_config(cfg)
    (tmp_path / "c.yaml").write_text(text)
    again = load_config(tmp_path / "c.yaml")
    assert dump_config(again) == text
    assert again.global_.resolution == 0.75 and again.local.max_frames == 7


@pytest.mark.parametrize(
    "override",
    [
        {"global.min_overlap": 0.5},
        {"local.skip_overlap": 1.5},
        {"global.resolution": 0.0},
        {"global.schedule": "sometimes"},
        {"nosuch.key": 1},
        {"local.nosuch": 1},
    ],
)
def test_invalid_config_rejected(override):
    with pytest.raises(ConfigError):
        PipelineConfig().override(override)


def test_unknown_config_section(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"bogus": {}}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")


# --- graph export and CLI ----------------------------------------------------


SMALL = {"frames": 10, "points_per_scan": 2048, "seed": 1}


def _spec_file(tmp_path, **kw):
    p = tmp_path / "scene.yaml"
    p.write_text(yaml.safe_dump({**SMALL, **kw}))
    return p


def test_graph_single_submap(tmp_path):
    spec = SyntheticSceneSpec(shape="line", frames=2, points_per_scan=2048, step=0.01)
    res = cli.run_pipeline(PipelineConfig().override({"threads": 1}), cli.synthetic_inputs(spec), tmp_path, evaluate_map=False)
    recs = io.read_jsonl(res.artifacts["graph"])
    assert [r["kind"] for r in recs] == ["node"]


def test_figure_eight_graph_matches_recorded_edges(tmp_path):
    spec = SyntheticSceneSpec(shape="figure-eight", frames=60, points_per_scan=2048, radius=30.0, seed=2)
    cfg = PipelineConfig().override({"threads": 1, "local.max_frames": 5})
    res = cli.run_pipeline(cfg, cli.synthetic_inputs(spec), tmp_path, evaluate_map=False)
    recs = io.read_jsonl(res.artifacts["graph"])
    nodes = [r for r in recs if r["kind"] == "node"]
    edges = [r for r in recs if r["kind"] == "edge"]
    mapper = res.pipeline.mapper
    assert len(nodes) == len(mapper.submaps)
    assert sorted((tuple(e["pair"]), e["type"]) for e in edges) == sorted(
        (tuple(e["pair"]), e["type"]) for e in mapper.edges
    )
    mc = [e for e in edges if e["type"] == "matching_cost"]
    assert len(mc) == len(mapper.graph.matching_factors) > len(nodes) - 1
    assert all(e["overlap"] > cfg.global_.min_overlap for e in mc)
    types = {e["type"] for e in edges}
    assert types <= {"matching_cost", "loop", "odometry"}


def test_cli_missing_odometry_is_setup_error(tmp_path, capsys):
    scans = tmp_path / "scans"
    scans.mkdir()
    io.write_kitti_scan(scans / "000000.bin", np.zeros((4, 3)))
    code = cli.main(["--scans", str(scans), "--out-dir", str(tmp_path / "out")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and err["stage"] == "setup"
    assert not (tmp_path / "out").exists()


def test_cli_bad_scan_reports_offset(tmp_path, capsys):
    scans = tmp_path / "scans"
    scans.mkdir()
    (scans / "000000.bin").write_bytes(b"\x00" * 17)
    io.write_trajectory_kitti([Pose()], tmp_path / "odom.txt")
    code = cli.main(["--scans", str(scans), "--odometry", str(tmp_path / "odom.txt"), "--out-dir", str(tmp_path / "out")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["stage"] == "ingest" and err["frame"] == 0 and "offset 16" in err["message"]


def test_cli_synthetic_run_exports_artifacts(tmp_path):
    out = tmp_path / "out"
    code = cli.main([
        "--synthetic", str(_spec_file(tmp_path, shape="line")), "--out-dir", str(out),
        "--threads", "1", "--set", "local.max_frames=4",
    ])
    assert code == 0
    for name in ("trajectory.txt", "map.ply", "graph.jsonl", "events.jsonl", "optimizer_trace.jsonl",
                 "metrics.json", "config.yaml", "ground_truth.txt", "odometry.txt", "trajectory.png", "graph.png"):
        assert (out / name).exists(), name
    traj = io.read_trajectory_kitti(out / "trajectory.txt")
    assert len(traj) == 10
    metrics = json.loads((out / "metrics.json").read_text())
    # ten 2 m frames are shorter than the shortest standard segment
    assert metrics["rte"]["rotational_deg_per_100m"] is None
    assert metrics["ate"] < 0.1
    assert load_config(out / "config.yaml").local.max_frames == 4


def test_cli_rejects_unknown_override(tmp_path, capsys):
    code = cli.main(["--synthetic", "line", "--out-dir", str(tmp_path), "--set", "nope.x=1"])
    assert code == 2


def test_pipeline_error_carries_context():
    err = cli.PipelineError("mapping", ValueError("bad"), frame=3, submap=1)
    d = err.diagnostic()
    assert d == {"error": "ValueError", "message": "bad", "stage": "mapping", "frame": 3, "submap": 1}
    assert "frame=3" in str(err)


def test_pipeline_wraps_module_failures(tmp_path):
    spec = SyntheticSceneSpec(shape="line", **SMALL)
    inputs = cli.synthetic_inputs(spec)
    scans = list(inputs.scans())
    scans[4] = np.zeros((2, 3))  # too few points for covariance estimation
    inputs.scans = lambda: iter(scans)
    with pytest.raises(cli.PipelineError) as exc:
        cli.run_pipeline(PipelineConfig().override({"threads": 1}), inputs, tmp_path / "o")
    assert exc.value.frame == 4
    assert not (tmp_path / "o").exists()
