"""Plot-data emission: aligned CSVs for series, score curve, and embeddings.

Three files per run. The series file carries the raw signal plus point
labels; the score file carries the score curve with its plotting positions
shifted by one window length, alongside the threshold; the embedding file
carries a 2-D projection of normal-pool / pseudo-negative / test embeddings.

The projection is PCA on the centered, stacked embeddings (equivalent to
classical MDS on Euclidean distances), with a deterministic sign convention,
so distances are preserved as well as any linear 2-D view can.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .pipeline import ARTIFACTS, PreparedData, StageError, _stage_rngs, prepare_data
from .prototypes import load_bank

EMBED_SAMPLE_CAP = 400  # per role, keeps the scatter file small


def _project_2d(embeddings: np.ndarray) -> np.ndarray:
    centered = embeddings - embeddings.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):  # deterministic orientation
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def emit_plots(run_dir: str | Path, render: bool = False) -> dict[str, str]:
    """Write plot-data CSVs next to the run artifacts; returns their paths.

    With ``render=True`` also draws PNGs (requires matplotlib).
    """
    run_dir = Path(run_dir)
    cfg_path = run_dir / ARTIFACTS["config"]
    if not cfg_path.exists():
        raise StageError("plots", f"missing run config: {cfg_path}")
    cfg = RunConfig.from_ini(cfg_path.read_text())
    data: PreparedData = prepare_data(cfg, _stage_rngs(cfg.run.seed)["data"])

    out = {
        "series": str(run_dir / "plot_series.csv"),
        "scores": str(run_dir / "plot_scores.csv"),
        "embedding": str(run_dir / "plot_embedding.csv"),
    }

    series = data.raw_series
    with open(out["series"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"v{i}" for i in range(series.dims)] + ["label", "segment"])
        labels = series.labels if series.labels is not None else np.zeros(series.length, dtype=int)
        for t in range(series.length):
            segment = "train" if t < data.split else "test"
            writer.writerow([t] + [repr(float(v)) for v in series.values[t]] + [int(labels[t]), segment])

    scores_path = run_dir / ARTIFACTS["scores"]
    if not scores_path.exists():
        raise StageError("plots", f"missing scores file: {scores_path}")
    threshold = None
    report_path = run_dir / ARTIFACTS["report"]
    if report_path.exists():
        threshold = json.loads(report_path.read_text())["threshold"]
    with open(scores_path, newline="") as fh:
        score_rows = list(csv.DictReader(fh))
    with open(out["scores"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_start", "plot_position", "score", "threshold", "label", "prediction"])
        for row in score_rows:
            start = int(row["window_start"])
            writer.writerow([
                start,
                start + cfg.window.width,
                row["score"],
                "" if threshold is None else repr(float(threshold)),
                row["label"],
                row["prediction"],
            ])

    bank_path = run_dir / ARTIFACTS["bank"]
    pools_path = run_dir / ARTIFACTS["pools"]
    for p in (bank_path, pools_path):
        if not p.exists():
            raise StageError("plots", f"missing checkpoint: {p}")
    bank, _ = load_bank(bank_path)
    _, pools = load_checkpoint(pools_path, expect_kind="pools")
    rng = np.random.default_rng(cfg.run.seed)

    def sample(arr):
        if len(arr) <= EMBED_SAMPLE_CAP:
            return arr
        return arr[rng.choice(len(arr), EMBED_SAMPLE_CAP, replace=False)]

    groups = [
        ("pos", bank.encoder.embed(sample(pools["pos"]))),
        ("neg", bank.encoder.embed(sample(pools["neg"]))),
        ("test", bank.encoder.embed(data.test_windows.windows)),
    ]
    stacked = np.concatenate([g[1] for g in groups])
    projected = _project_2d(stacked)
    with open(out["embedding"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "role"])
        offset = 0
        for role, emb in groups:
            for i in range(len(emb)):
                writer.writerow([repr(float(projected[offset + i, 0])),
                                 repr(float(projected[offset + i, 1])), role])
            offset += len(emb)

    if render:
        _render_pngs(run_dir, out, data, threshold, cfg.window.width)
        out["png_dir"] = str(run_dir)
    return out


def _render_pngs(run_dir: Path, files: dict, data: PreparedData, threshold, width: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = data.raw_series
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(series.values[:, 0], lw=0.8)
    if series.labels is not None and series.labels.any():
        marked = np.where(series.labels == 1)[0]
        ax.scatter(marked, series.values[marked, 0], s=6, color="crimson", zorder=3)
    ax.axvline(data.split, color="gray", ls="--", lw=0.8)
    ax.set_title("input series (train | test)")
    fig.tight_layout()
    fig.savefig(run_dir / "plot_series.png", dpi=120)
    plt.close(fig)

    with open(files["scores"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    xs = [int(r["plot_position"]) for r in rows]
    ys = [float(r["score"]) for r in rows]
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(xs, ys, lw=0.9)
    if threshold is not None:
        ax.axhline(threshold, color="crimson", ls="--", lw=0.8)
    ax.set_title(f"anomaly score (shifted by w={width})")
    fig.tight_layout()
    fig.savefig(run_dir / "plot_scores.png", dpi=120)
    plt.close(fig)

    with open(files["embedding"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = plt.subplots(figsize=(5, 5))
    colors = {"pos": "tab:blue", "neg": "tab:orange", "test": "tab:green"}
    for role in ("pos", "neg", "test"):
        pts = [(float(r["x"]), float(r["y"])) for r in rows if r["role"] == role]
        if pts:
            arr = np.array(pts)
            ax.scatter(arr[:, 0], arr[:, 1], s=6, alpha=0.6, label=role, color=colors[role])
    ax.legend()
    ax.set_title("embedding projection")
    fig.tight_layout()
    fig.savefig(run_dir / "plot_embedding.png", dpi=120)
    plt.close(fig)
