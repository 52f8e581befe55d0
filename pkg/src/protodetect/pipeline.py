"""End-to-end orchestration: data prep, the three stages, scoring, benchmark.

Each stage writes a checkpoint and the run ends with an atomically written
manifest, so any stage can be rerun in isolation (``from_stage``). Stage
boundaries are files, not in-memory handoff. Per-stage RNG streams are
spawned from the run seed, so resuming stage N reproduces exactly what a
full run would have done from stage N onward.
"""

from __future__ import annotations

import csv
import json
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boundary_rl import (
    BandConfig,
    Stage2Diverged,
    Stage2RLConfig,
    make_agent,
    run_stage2_rl,
    trajectory_rows,
    TRAJECTORY_COLUMNS,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_intervals
from .data import (
    AnomalySpec,
    CsvSchema,
    NormStats,
    TimeSeries,
    WindowSet,
    benchmark_spec,
    generate_synthetic,
    load_csv,
    make_windows,
    normalize,
)
from .encoder import EncoderConfig, TripletEncoder, TripletTrainConfig, load_encoder, save_encoder, train_stage2
from .prototypes import PrototypeBank, PrototypeConfig, init_prototypes, load_bank, save_bank, train_stage3
from .recon import ReconConfig, ReconModel, load_recon, pretrain, save_recon
from .scoring import evaluate, pick_threshold, score_windows

STAGE_NAMES = {1: "stage1-recon", 2: "stage2-boundary", 3: "stage3-prototypes", 4: "eval"}

ARTIFACTS = {
    "config": "config.ini",
    "stage1": "stage1_recon.npz",
    "pools": "stage2_pools.npz",
    "encoder": "stage2_encoder.npz",
    "bank": "stage3_bank.npz",
    "trajectory": "trajectory.csv",
    "report": "eval_report.json",
    "scores": "scores.csv",
    "manifest": "manifest.json",
}


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass
class PreparedData:
    train_windows: WindowSet
    test_windows: WindowSet
    stats: NormStats
    raw_series: TimeSeries  # full, unnormalized, for plotting
    split: int  # first index of the test segment


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    artifacts: dict = field(default_factory=dict)
    stage1_history: list = field(default_factory=list)
    stage1_final_loss: float = 0.0
    band: dict = field(default_factory=dict)
    in_band_per_epoch: list = field(default_factory=list)
    pool_size: int = 0
    triplet_history: list = field(default_factory=list)
    stage3_history: list = field(default_factory=list)
    eval_report: dict | None = None
    timings: dict = field(default_factory=dict)

    def save(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        if not path.exists():
            raise StageError("resume", f"missing manifest: {path}")
        return cls(**json.loads(path.read_text()))


def _stage_rngs(seed: int) -> dict[str, np.random.Generator]:
    streams = np.random.SeedSequence(seed).spawn(5)
    names = ("data", "stage1", "stage2_rl", "stage2_triplet", "stage3")
    return {name: np.random.default_rng(ss) for name, ss in zip(names, streams)}


def _build_spec(cfg: RunConfig) -> AnomalySpec:
    d = cfg.data
    magnitude = None if d.magnitude <= 0 else d.magnitude
    if d.anomaly_intervals.strip() == "auto":
        return benchmark_spec(
            d.kind, d.train_points, d.test_points,
            period=d.period, amplitude=d.amplitude, noise_sigma=d.noise_sigma,
            magnitude=magnitude, trend_slope=d.trend_slope,
        )
    return AnomalySpec(
        kind=d.kind,
        intervals=parse_intervals(d.anomaly_intervals),
        magnitude=1.0 if magnitude is None else magnitude,
        period=d.period,
        amplitude=d.amplitude,
        noise_sigma=d.noise_sigma,
        trend_slope=d.trend_slope,
    )


def prepare_data(cfg: RunConfig, rng: np.random.Generator) -> PreparedData:
    d, w = cfg.data, cfg.window
    if d.source == "synthetic":
        spec = _build_spec(cfg)
        total = d.train_points + d.test_points
        series = generate_synthetic(spec, total, seed=rng)
        split = d.train_points
    else:
        schema = CsvSchema(
            timestamp=d.csv_timestamp or None,
            values=tuple(v.strip() for v in d.csv_values.split(",") if v.strip()) or None,
            label=d.csv_label or None,
        )
        series = load_csv(d.csv_path, schema)
        split = int(d.train_fraction * series.length)
    train = series.slice(0, split, name="train")
    test = series.slice(split, series.length, name="test")
    if train.labels is not None and train.labels.sum() > 0:
        warnings.warn("training split contains labeled anomalies; the pipeline assumes a clean train segment")
    train_norm, stats = normalize(train)
    test_norm, _ = normalize(test, stats)
    return PreparedData(
        train_windows=make_windows(train_norm, w.width, w.stride),
        test_windows=make_windows(test_norm, w.width, w.stride),
        stats=stats,
        raw_series=series,
        split=split,
    )


def _resolved_band(cfg: RunConfig, base_loss: float, model: ReconModel,
                   windows: np.ndarray) -> BandConfig:
    s2 = cfg.stage2_rl
    # floors keep the band meaningful in data units: a well-converged stage 1
    # pushes scale * final-loss below the augmentation noise, where the
    # generated negatives stop being negatives
    band = BandConfig(
        low=max(s2.band_low_scale * base_loss, s2.band_low_min),
        up=max(s2.band_up_scale * base_loss, s2.band_up_min),
        step_pos=s2.step_pos if s2.step_pos > 0 else 1.0,
        step_neg=s2.step_neg if s2.step_neg > 0 else 1.0,
        action_min=s2.action_min,
        action_max=s2.action_max,
    )
    if s2.step_pos > 0 and s2.step_neg > 0:
        return band
    # 0-sentinel: derive the base step from a gradient-norm probe at band
    # altitude; a fixed fraction of the optimizer lr diverges because raw
    # gradient steps scale with the gradient norm, not with the adaptive lr
    from .boundary_rl import calibrate_step_size

    step = calibrate_step_size(model, windows, band, s2.batch_size)
    band.step_pos = s2.step_pos if s2.step_pos > 0 else step
    band.step_neg = s2.step_neg if s2.step_neg > 0 else step
    return band


def _write_trajectory(path: Path, trajectory, band: BandConfig) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        writer.writerows(trajectory_rows(trajectory, band))


def _write_scores_csv(path: Path, starts_abs, scores, labels, predictions) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("window_start", "score", "label", "prediction"))
        for s, sc, lab, pred in zip(starts_abs, scores, labels, predictions):
            writer.writerow((int(s), repr(float(sc)), int(lab), int(pred)))


def run_pipeline(cfg: RunConfig, outdir: str | Path, from_stage: int = 1) -> RunManifest:
    """Execute stages ``from_stage``..4 into ``outdir`` and return the manifest.

    Stage numbering: 1 = reconstruction pretraining, 2 = controller +
    triplet encoder, 3 = prototype refinement, 4 = scoring/evaluation.
    Earlier stages must have left checkpoints in ``outdir`` when skipped.
    """
    cfg.validate()
    if from_stage not in (1, 2, 3, 4):
        raise StageError("setup", f"from_stage must be 1..4, got {from_stage}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {key: outdir / name for key, name in ARTIFACTS.items()}
    paths["config"].write_text(cfg.to_ini())

    rngs = _stage_rngs(cfg.run.seed)
    data = prepare_data(cfg, rngs["data"])
    w, dims = cfg.window.width, data.train_windows.windows.shape[2]

    if from_stage > 1:
        manifest = RunManifest.load(paths["manifest"])
        if manifest.config_hash != cfg.config_hash():
            warnings.warn("resuming with a config that differs from the recorded run")
        manifest.config_hash = cfg.config_hash()
    else:
        manifest = RunManifest(config_hash=cfg.config_hash(), seed=cfg.run.seed)
    manifest.artifacts = {key: str(paths[key]) for key in ARTIFACTS}

    # ---- stage 1: reconstruction pretraining ----------------------------
    t0 = time.perf_counter()
    if from_stage <= 1:
        s1 = cfg.stage1
        model = ReconModel(
            ReconConfig(width=w, dims=dims, hidden=s1.hidden, blocks=s1.blocks,
                        heads=s1.heads, ff_mult=s1.ff_mult),
            rngs["stage1"],
        )
        try:
            history = pretrain(model, data.train_windows.windows, s1.epochs, s1.lr,
                               s1.batch_size, rngs["stage1"], s1.optimizer)
        except Exception as err:
            raise StageError(STAGE_NAMES[1], str(err)) from err
        save_recon(model, paths["stage1"])
        manifest.stage1_history = history
        manifest.stage1_final_loss = history[-1] if history else 0.0
        manifest.save(paths["manifest"])
    else:
        if not paths["stage1"].exists():
            raise StageError("resume", f"missing checkpoint: {paths['stage1']}")
        model = load_recon(paths["stage1"])
    manifest.timings["stage1"] = time.perf_counter() - t0

    # ---- stage 2: boundary controller + triplet encoder -----------------
    t0 = time.perf_counter()
    if from_stage <= 2:
        s2 = cfg.stage2_rl
        base_loss = manifest.stage1_final_loss
        if base_loss <= 0:
            raise StageError(STAGE_NAMES[2], "stage-1 final loss unavailable; rerun stage 1")
        band = _resolved_band(cfg, base_loss, model, data.train_windows.windows)
        rl_cfg = Stage2RLConfig(
            epochs=s2.epochs, batch_size=s2.batch_size, history_len=s2.history_len,
            buffer_capacity=s2.buffer_capacity, minibatch=s2.minibatch,
            agent_hidden=s2.agent_hidden, actor_lr=s2.actor_lr, critic_lr=s2.critic_lr,
            explore_sigma=s2.explore_sigma, explore_decay=s2.explore_decay,
            policy=s2.policy, pool_all=s2.pool_all, ephemeral_theta=s2.ephemeral_theta,
            reset_per_epoch=s2.reset_per_epoch,
        )
        agent = make_agent(rl_cfg, band, rngs["stage2_rl"])
        try:
            result = run_stage2_rl(model, agent, data.train_windows, band, rl_cfg, rngs["stage2_rl"])
        except Stage2Diverged as err:
            _write_trajectory(paths["trajectory"], err.trajectory, band)
            raise StageError(STAGE_NAMES[2], str(err)) from err
        if len(result.pos_pool) == 0:
            raise StageError(STAGE_NAMES[2], "controller harvested no boundary negatives; widen the band or raise epochs")
        _write_trajectory(paths["trajectory"], result.trajectory, band)
        save_checkpoint(
            paths["pools"], "pools",
            {"band": {"low": band.low, "up": band.up, "target": band.target,
                      "step_pos": band.step_pos, "step_neg": band.step_neg},
             "in_band_per_epoch": result.in_band_per_epoch,
             "policy": s2.policy},
            {"pos": result.pos_pool, "neg": result.neg_pool,
             "starts": result.pool_starts.astype(np.float64)},
        )
        manifest.band = {"low": band.low, "up": band.up, "target": band.target,
                         "step_pos": band.step_pos, "step_neg": band.step_neg}
        manifest.in_band_per_epoch = result.in_band_per_epoch
        manifest.pool_size = int(len(result.pos_pool))

        st = cfg.stage2_triplet
        encoder = TripletEncoder(
            EncoderConfig(width=w, dims=dims, hidden=st.hidden, embed_dim=st.embed_dim),
            rngs["stage2_triplet"],
        )
        tri_cfg = TripletTrainConfig(
            epochs=st.epochs, margin=st.margin, compact_weight=st.compact_weight,
            lr=st.lr, batch_size=st.batch_size,
            jitter_sigma=st.jitter_sigma, scale_sigma=st.scale_sigma,
        )
        try:
            manifest.triplet_history = train_stage2(
                encoder, result.pos_pool, result.neg_pool, tri_cfg, rngs["stage2_triplet"])
        except Exception as err:
            raise StageError(STAGE_NAMES[2], str(err)) from err
        save_encoder(encoder, paths["encoder"])
        manifest.save(paths["manifest"])
        pos_pool, neg_pool = result.pos_pool, result.neg_pool
    else:
        for key in ("pools", "encoder"):
            if not paths[key].exists():
                raise StageError("resume", f"missing checkpoint: {paths[key]}")
        _, pools = load_checkpoint(paths["pools"], expect_kind="pools")
        pos_pool, neg_pool = pools["pos"], pools["neg"]
        encoder = load_encoder(paths["encoder"])
    manifest.timings["stage2"] = time.perf_counter() - t0

    # ---- stage 3: prototype refinement -----------------------------------
    t0 = time.perf_counter()
    if from_stage <= 3:
        s3 = cfg.stage3
        proto_cfg = PrototypeConfig(
            count=s3.count, temperature=s3.temperature, margin=s3.margin,
            margin_anomaly=None if s3.margin_anomaly < 0 else s3.margin_anomaly,
            margin_dispersion=None if s3.margin_dispersion < 0 else s3.margin_dispersion,
            weight_normal=s3.weight_normal, weight_anomaly=s3.weight_anomaly,
            weight_dispersion=s3.weight_dispersion, weight_balance=s3.weight_balance,
            epochs=s3.epochs, lr=s3.lr, encoder_lr_scale=s3.encoder_lr_scale,
            batch_size=s3.batch_size,
        )
        try:
            protos = init_prototypes(encoder.embed(pos_pool), proto_cfg.count, rngs["stage3"])
            bank = PrototypeBank(encoder, protos, proto_cfg)
            manifest.stage3_history = train_stage3(bank, pos_pool, neg_pool, rngs["stage3"])
        except Exception as err:
            raise StageError(STAGE_NAMES[3], str(err)) from err
        save_bank(bank, paths["bank"], extra_meta={
            "window": {"width": w, "stride": cfg.window.stride, "dims": dims},
            "norm_mean": list(data.stats.mean),
            "norm_scale": list(data.stats.scale),
        })
        manifest.save(paths["manifest"])
    else:
        if not paths["bank"].exists():
            raise StageError("resume", f"missing checkpoint: {paths['bank']}")
        bank, _ = load_bank(paths["bank"])
    manifest.timings["stage3"] = time.perf_counter() - t0

    # ---- scoring and evaluation ------------------------------------------
    t0 = time.perf_counter()
    try:
        train_scores = bank.score_batch(data.train_windows.windows)
        threshold = pick_threshold(train_scores, cfg.eval.quantile)
        test_series = score_windows(bank, data.test_windows)
        predictions = (test_series.scores >= threshold).astype(np.int64)
        labels = data.test_windows.labels
        starts_abs = test_series.starts + data.split
        if labels is None:
            warnings.warn("test split has no labels; writing scores without an eval report")
            _write_scores_csv(paths["scores"], starts_abs, test_series.scores,
                              np.zeros(len(test_series), dtype=np.int64), predictions)
            manifest.eval_report = None
        else:
            _write_scores_csv(paths["scores"], starts_abs, test_series.scores, labels, predictions)
            if labels.min() == labels.max():
                warnings.warn("test split has a single class; skipping the eval report")
                manifest.eval_report = None
            else:
                report = evaluate(test_series.scores, labels, threshold)
                paths["report"].write_text(report.to_json())
                manifest.eval_report = json.loads(report.to_json())
    except StageError:
        raise
    except Exception as err:
        raise StageError(STAGE_NAMES[4], str(err)) from err
    manifest.timings["eval"] = time.perf_counter() - t0
    manifest.save(paths["manifest"])
    return manifest


# ---------------------------------------------------------------------------
# benchmark runner
# ---------------------------------------------------------------------------


def run_benchmark(
    base_cfg: RunConfig,
    kinds: list[str],
    seeds: list[int],
    outdir: str | Path,
    sweep: tuple[str, list[str]] | None = None,
) -> dict:
    """One pipeline run per (kind, seed[, sweep value]); returns the results
    table with per-kind aggregates and writes results.csv / results.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sweep_key, sweep_values = sweep if sweep else (None, [None])

    rows = []
    for kind in kinds:
        for value in sweep_values:
            for seed in seeds:
                cfg = RunConfig.from_ini(base_cfg.to_ini())
                cfg.data.kind = kind
                cfg.run.seed = seed
                tag = f"{kind}_seed{seed}"
                if sweep_key is not None:
                    cfg.apply_overrides([f"{sweep_key}={value}"])
                    tag += f"_{sweep_key.split('.')[-1]}{value}"
                run_dir = outdir / tag
                cfg.run.outdir = str(run_dir)
                started = time.perf_counter()
                manifest = run_pipeline(cfg, run_dir)
                if manifest.eval_report is None:
                    raise StageError("benchmark", f"run {tag} produced no eval report")
                row = {
                    "kind": kind,
                    "seed": seed,
                    "auc": manifest.eval_report["auc"],
                    "tp": manifest.eval_report["tp"],
                    "tn": manifest.eval_report["tn"],
                    "fp": manifest.eval_report["fp"],
                    "fn": manifest.eval_report["fn"],
                    "predicted_anomalies": manifest.eval_report["predicted_anomalies"],
                    "threshold": manifest.eval_report["threshold"],
                    "runtime_seconds": time.perf_counter() - started,
                    "run_dir": str(run_dir),
                }
                if sweep_key is not None:
                    row[sweep_key] = value
                rows.append(row)

    aggregates = []
    for kind in kinds:
        for value in sweep_values:
            group = [r for r in rows if r["kind"] == kind and r.get(sweep_key) == value] \
                if sweep_key else [r for r in rows if r["kind"] == kind]
            aucs = np.array([r["auc"] for r in group])
            agg = {
                "kind": kind,
                "runs": len(group),
                "auc_mean": float(aucs.mean()),
                "auc_std": float(aucs.std()),
            }
            if sweep_key is not None:
                agg[sweep_key] = value
            aggregates.append(agg)

    results = {"rows": rows, "aggregates": aggregates}
    (outdir / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    with open(outdir / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["kind", "seed", "auc", "tp", "tn", "fp", "fn", "predicted_anomalies"]
        if sweep_key:
            header.insert(2, sweep_key)
        writer.writerow(header)
        for r in rows:
            line = [r["kind"], r["seed"], repr(r["auc"]), r["tp"], r["tn"], r["fp"], r["fn"],
                    r["predicted_anomalies"]]
            if sweep_key:
                line.insert(2, r[sweep_key])
            writer.writerow(line)
        for agg in aggregates:
            line = [agg["kind"], "aggregate", repr(agg["auc_mean"]), "", "", "", "", ""]
            if sweep_key:
                line.insert(2, agg[sweep_key])
            writer.writerow(line)
    return results
