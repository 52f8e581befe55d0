"""Command-line entry points: train, resume, score, benchmark, plots."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import CsvSchema, load_csv, make_windows, normalize
from .data import NormStats
from .pipeline import ARTIFACTS, StageError, run_benchmark, run_pipeline
from .prototypes import load_bank


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.from_ini(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "outdir", None):
        overrides.append(f"run.outdir={args.outdir}")
    if overrides:
        cfg.apply_overrides(overrides)
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = run_pipeline(cfg, cfg.run.outdir)
    print(f"run complete: {cfg.run.outdir}")
    if manifest.eval_report:
        print(json.dumps(manifest.eval_report, indent=2, sort_keys=True))
    return 0


def _cmd_resume(args) -> int:
    run_dir = Path(args.run_dir)
    cfg_path = run_dir / ARTIFACTS["config"]
    if not cfg_path.exists():
        raise StageError("resume", f"missing run config: {cfg_path}")
    cfg = RunConfig.from_ini(cfg_path.read_text())
    if args.set:
        cfg.apply_overrides(args.set)
    manifest = run_pipeline(cfg, run_dir, from_stage=args.from_stage)
    print(f"resumed from stage {args.from_stage}: {run_dir}")
    if manifest.eval_report:
        print(json.dumps(manifest.eval_report, indent=2, sort_keys=True))
    return 0


def _cmd_score(args) -> int:
    bank, meta = load_bank(args.bank)
    schema = CsvSchema(
        timestamp=args.timestamp_col or None,
        values=tuple(v for v in (args.value_cols or "").split(",") if v) or None,
        label=args.label_col or None,
    )
    series = load_csv(args.input, schema)
    stats = NormStats(mean=np.array(meta["norm_mean"]), scale=np.array(meta["norm_scale"]))
    normed, _ = normalize(series, stats)
    window_meta = meta["window"]
    windows = make_windows(normed, window_meta["width"], window_meta["stride"])
    scores = bank.score_batch(windows.windows)

    threshold = args.threshold
    out = Path(args.output)
    with open(out, "w", newline="") as fh:
        fh.write("window_start,score" + (",prediction" if threshold is not None else "") + "\n")
        for start, score in zip(windows.starts, scores):
            line = f"{int(start)},{score!r}"
            if threshold is not None:
                line += f",{int(score >= threshold)}"
            fh.write(line + "\n")
    print(f"scored {len(scores)} windows -> {out}")
    return 0


def _cmd_benchmark(args) -> int:
    cfg = _load_config(args)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    sweep = None
    if args.sweep:
        key, _, values = args.sweep.partition("=")
        if not values:
            raise ConfigError("sweep must look like section.key=v1,v2,...")
        sweep = (key.strip(), [v.strip() for v in values.split(",")])
    results = run_benchmark(cfg, kinds, seeds, args.outdir, sweep=sweep)
    for agg in results["aggregates"]:
        label = agg["kind"] if not sweep else f"{agg['kind']} {sweep[0]}={agg[sweep[0]]}"
        print(f"{label}: AUC {agg['auc_mean']:.4f} +/- {agg['auc_std']:.4f} over {agg['runs']} runs")
    return 0


def _cmd_plots(args) -> int:
    from .plots import emit_plots

    files = emit_plots(args.run_dir, render=args.render)
    for name, path in files.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protodetect",
        description="Three-stage time-series anomaly detection: reconstruction "
                    "pretraining, boundary negative mining, prototype scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the full pipeline")
    train.add_argument("--config", help="INI config file (defaults used when omitted)")
    train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
    train.add_argument("--seed", type=int, help="shortcut for run.seed")
    train.add_argument("--outdir", help="shortcut for run.outdir")
    train.set_defaults(func=_cmd_train)

    resume = sub.add_parser("resume", help="rerun a pipeline from a given stage")
    resume.add_argument("--run-dir", required=True)
    resume.add_argument("--from-stage", type=int, required=True, choices=(1, 2, 3, 4),
                        help="1=recon, 2=boundary+encoder, 3=prototypes, 4=eval")
    resume.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    resume.set_defaults(func=_cmd_resume)

    score = sub.add_parser("score", help="apply a saved prototype bank to a CSV")
    score.add_argument("--bank", required=True, help="stage-3 bank checkpoint (.npz)")
    score.add_argument("--input", required=True, help="CSV series to score")
    score.add_argument("--output", required=True, help="CSV of window scores")
    score.add_argument("--threshold", type=float, help="emit 0/1 predictions at this score")
    score.add_argument("--timestamp-col", help="timestamp column to ignore")
    score.add_argument("--label-col", help="label column to ignore")
    score.add_argument("--value-cols", help="comma-separated value columns")
    score.set_defaults(func=_cmd_score)

    bench = sub.add_parser("benchmark", help="run the synthetic benchmark suite")
    bench.add_argument("--kinds", default="seasonal,global",
                       help="comma-separated anomaly kinds")
    bench.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    bench.add_argument("--outdir", required=True)
    bench.add_argument("--config", help="base INI config")
    bench.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    bench.add_argument("--sweep", metavar="SECTION.KEY=V1,V2",
                       help="repeat the suite for each value of one key")
    bench.set_defaults(func=_cmd_benchmark)

    plots = sub.add_parser("plots", help="emit plot-data CSVs for a finished run")
    plots.add_argument("--run-dir", required=True)
    plots.add_argument("--render", action="store_true",
                       help="also render PNGs (requires matplotlib)")
    plots.set_defaults(func=_cmd_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as err:
        print(f"[{err.stage}] {err}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
