"""Command-line front door: gen-data, train, ttt, eval, report, ablate, run."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, load_config, parse_value, save_config


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="dotted key-value config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )


def _build_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = parse_value(value)
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    from .data import default_splits, save_dataset

    cfg = _build_config(args)
    train_ds, test_ds = default_splits(cfg.data)
    out = Path(args.out)
    if args.split in ("train", "both"):
        save_dataset(train_ds, out / "train")
    if args.split in ("test", "both"):
        save_dataset(test_ds, out / "test")
    save_config(cfg, out / "config.txt")
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test videos under {out}")
    return 0


def cmd_train(args) -> int:
    from .data import default_splits, load_dataset
    from .model import init_model, save_checkpoint
    from .train import train_stage1, write_history_csv

    cfg = _build_config(args)
    if args.data:
        dataset = load_dataset(args.data)
    else:
        dataset, _ = default_splits(cfg.data)
    model = init_model(cfg.model, seed=cfg.train.seed)
    model, history = train_stage1(model, dataset, cfg.train, cfg.loss, cfg.aug)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, seed=cfg.train.seed)
    write_history_csv(history, out.with_name("history.csv"))
    last = history[-1] if history else {}
    print(f"saved checkpoint to {out}; final joint loss {last.get('joint', float('nan')):.4f}")
    return 0


def cmd_ttt(args) -> int:
    from .data import default_splits, load_dataset
    from .harness import _write_trace_csv, save_predictions
    from .model import load_checkpoint, save_checkpoint
    from .ttt import adapt_video

    cfg = _build_config(args)
    if args.strategy:
        cfg.ttt.strategy = args.strategy
    if args.objective:
        cfg.ttt.objective = "pseudo_depth" if args.objective == "pseudo" else args.objective
    if args.epochs is not None:
        cfg.ttt.epochs = args.epochs
    if args.clips is not None:
        cfg.ttt.clip_sampling = args.clips if args.clips > 0 else None
    cfg.ttt.validate()

    model, _ = load_checkpoint(args.ckpt)
    if args.data:
        dataset = load_dataset(args.data, synthetic_fallback=cfg.ttt.objective != "pseudo_depth")
    else:
        _, dataset = default_splits(cfg.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predictions = {}
    for seq in dataset:
        outcome = adapt_video(model, seq, cfg.ttt, cfg.aug, cfg.loss)
        _write_trace_csv(outcome, out / f"trace_{seq.video_id}.csv")
        predictions[seq.video_id] = outcome.final_masks
        if args.save_snapshots:
            snap_dir = out / "snapshots" / seq.video_id
            snap_dir.mkdir(parents=True, exist_ok=True)
            for e, state in enumerate(outcome.snapshots, start=1):
                twin = load_checkpoint(args.ckpt)[0]
                twin.load_state_dict(state)
                save_checkpoint(twin, snap_dir / f"epoch{e:02d}.ckpt", seed=cfg.ttt.seed)
    save_predictions(predictions, out / "predictions")
    print(f"adapted {len(dataset)} videos with {cfg.ttt.strategy}; outputs under {out}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .harness import _write_report_csv, load_predictions
    from .metrics import evaluate

    dataset = load_dataset(args.data, synthetic_fallback=True)
    predictions = load_predictions(args.pred)
    report = evaluate(predictions, dataset, annotated_only=not args.all_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    _write_report_csv(report, out / "report.csv")
    print(f"mean J {report.aggregate['j']:.4f}  mean F {report.aggregate['f']:.4f}")
    return 0


def cmd_report(args) -> int:
    from .data import load_dataset
    from .harness import load_predictions
    from .metrics import FrameScore, MetricsReport
    from .report import render_report

    report_data = json.loads(Path(args.report).read_text())
    report = MetricsReport(
        per_frame=[FrameScore(**row) for row in report_data["per_frame"]],
        per_video=report_data["per_video"],
        aggregate=report_data["aggregate"],
        epoch_curves=report_data.get("epoch_curves", {}),
    )
    dataset = load_dataset(args.data, synthetic_fallback=True) if args.data else []
    predictions = load_predictions(args.pred) if args.pred else {}
    written = render_report(report, dataset, predictions, args.out)
    print(f"wrote {len(written)} figures under {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .harness import format_ablation_table, run_ablation, write_ablation_csv

    cfg = _build_config(args)
    rows = run_ablation(args.kind, cfg)
    print(format_ablation_table(rows))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_ablation_csv(rows, out)
        print(f"wrote {out}")
    return 0


def cmd_run(args) -> int:
    from .harness import rerun_manifest, run_pipeline

    if args.from_manifest:
        manifest = rerun_manifest(args.from_manifest, args.out, workers=args.workers)
    else:
        cfg = _build_config(args)
        manifest = run_pipeline(cfg, args.out, workers=args.workers)
    agg = manifest["metrics"]["aggregate"]
    print(f"pipeline complete: mean J {agg['j']:.4f}  mean F {agg['f']:.4f}")
    print(f"manifest: {manifest['outputs']['manifest']}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dattt",
        description="depth-aware test-time training laboratory for video object segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic train/test splits to disk")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "both"), default="both")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="stage-1 joint segmentation+depth training")
    _add_common(p)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--data", default=None, help="dataset root (default: generate synthetic)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ttt", help="per-video test-time adaptation")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--strategy", choices=("none", "ttt_n", "ttt_mwi", "ttt_ltv"), default=None)
    p.add_argument("--objective", choices=("consistency", "pseudo"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--clips", type=int, default=None, help="clip-sampling count (0 disables)")
    p.add_argument("--out", required=True)
    p.add_argument("--save-snapshots", action="store_true")
    p.set_defaults(fn=cmd_ttt)

    p = sub.add_parser("eval", help="score stored predictions against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--all-frames", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="render curves and overlay strips")
    p.add_argument("--report", required=True, help="report.json path")
    p.add_argument("--data", default=None)
    p.add_argument("--pred", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("ablate", help="run a sweep: lambda, augmentation, strategy, objective, clips")
    _add_common(p)
    p.add_argument("--kind", required=True)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("run", help="full pipeline: data, train, adapt, evaluate, report")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--from-manifest", default=None, help="replay a recorded manifest")
    p.set_defaults(fn=cmd_run)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
