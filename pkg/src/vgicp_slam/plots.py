"""Static figures rendered from the exported record files of a run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import read_jsonl, read_trajectory_kitti  # noqa: E402

EDGE_STYLE = {
    "matching_cost": dict(color="tab:blue", lw=0.8, alpha=0.6),
    "loop": dict(color="tab:red", lw=1.5),
    "odometry": dict(color="tab:gray", lw=1.0, ls="--"),
}


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trajectories(out_dir: Path) -> Path | None:
    est = out_dir / "trajectory.txt"
    if not est.exists():
        return None
    fig, ax = plt.subplots(figsize=(6, 6))
    for name, style in (("ground_truth.txt", "k-"), ("odometry.txt", "C1--"), ("trajectory.txt", "C0-")):
        p = out_dir / name
        if p.exists():
            t = read_trajectory_kitti(p).translations()
            ax.plot(t[:, 0], t[:, 1], style, lw=1.2, label=name.removesuffix(".txt"))
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend()
    path = out_dir / "trajectory.png"
    _save(fig, path)
    return path


def plot_graph(out_dir: Path) -> Path | None:
    src = out_dir / "graph.jsonl"
    if not src.exists():
        return None
    recs = read_jsonl(src)
    nodes = {r["id"]: np.array(r["t"]) for r in recs if r["kind"] == "node"}
    fig, ax = plt.subplots(figsize=(6, 6))
    seen = set()
    for r in recs:
        if r["kind"] != "edge":
            continue
        a, b = (nodes[k] for k in r["pair"])
        style = EDGE_STYLE.get(r["type"], dict(color="k"))
        label = r["type"] if r["type"] not in seen else None
        seen.add(r["type"])
        ax.plot([a[0], b[0]], [a[1], b[1]], label=label, **style)
    if nodes:
        xy = np.array(list(nodes.values()))
        ax.plot(xy[:, 0], xy[:, 1], "ko", ms=3)
    ax.set_aspect("equal")
    ax.legend()
    path = out_dir / "graph.png"
    _save(fig, path)
    return path


def plot_error_trace(out_dir: Path) -> Path | None:
    src = out_dir / "optimizer_trace.jsonl"
    if not src.exists():
        return None
    recs = [r for r in read_jsonl(src) if r.get("accepted")]
    if not recs:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    runs = sorted({r["run"] for r in recs})
    for run in runs[-5:]:
        rr = [r for r in recs if r["run"] == run]
        ax.semilogy([r["iteration"] for r in rr], [max(r["error"], 1e-12) for r in rr], ".-", label=f"run {run}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("total error")
    ax.legend()
    path = out_dir / "error_trace.png"
    _save(fig, path)
    return path


def plot_entropy(out_dir: Path) -> Path | None:
    src = out_dir / "entropy.npz"
    if not src.exists():
        return None
    data = np.load(src)
    pts, h = data["points"], data["entropy"]
    ok = np.isfinite(h)
    fig, ax = plt.subplots(figsize=(7, 6))
    lo, hi = np.percentile(h[ok], [2, 98]) if ok.any() else (0, 1)
    sc = ax.scatter(pts[ok, 0], pts[ok, 1], c=h[ok], s=0.3, cmap="turbo", vmin=lo, vmax=hi)
    fig.colorbar(sc, ax=ax, label="entropy [nats]")
    ax.set_aspect("equal")
    path = out_dir / "entropy.png"
    _save(fig, path)
    return path


def render_plots(out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    made = [f(out_dir) for f in (plot_trajectories, plot_graph, plot_error_trace, plot_entropy)]
    return [p for p in made if p is not None]
