"""Experiment orchestration: the full pipeline, ablation sweeps, manifests,
and the multi-seed directional study.

A manifest records everything needed to replay a run bit-identically: the
flat config snapshot, per-stage seeds, code version, input checksums, and
output paths.  Timing lives only in the manifest so ``report.json`` stays
byte-identical across replays.
"""

from __future__ import annotations

import csv
import hashlib
import json
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (
    ExperimentConfig,
    apply_overrides,
    config_as_jsonable,
    load_config,
    replace_deep,
    to_flat_dict,
)
from .data import VideoSequence, default_splits, load_dataset, save_dataset
from .metrics import MetricsReport, evaluate
from .model import init_model, load_checkpoint, save_checkpoint
from .report import render_report
from .train import train_stage1, write_history_csv
from .ttt import AdaptationOutcome, adapt_video, infer_video
from PIL import Image

ABLATION_KINDS = ("lambda", "augmentation", "strategy", "objective", "clips")
LAMBDA_GRID = (1.0, 0.1, 0.01)
CLIP_GRID = (1, 5, 10, 20)
AUG_KINDS = ("resize", "crop", "hflip", "brightness", "contrast", "saturation", "hue")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, check=True,
            cwd=Path(__file__).parent,
        ).stdout.strip()
        return f"{__version__}+g{rev}"
    except Exception:
        return __version__


def dataset_checksum(sequences: list[VideoSequence]) -> str:
    h = hashlib.sha256()
    for seq in sequences:
        h.update(seq.video_id.encode())
        for s in seq.samples:
            for arr in (s.image, s.flow, s.depth, s.mask):
                h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _write_trace_csv(outcome: AdaptationOutcome, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "frame_id", "init_source", "loss", "skipped",
                         "frame_epoch", "video_pass", "wall_ms"])
        for r in outcome.trace.records:
            writer.writerow([r.step, r.frame_id, r.init_source,
                             "" if r.loss is None else f"{r.loss:.8f}",
                             int(r.skipped), r.frame_epoch, r.video_pass, f"{r.wall_ms:.3f}"])


def _write_report_csv(report: MetricsReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "j", "f"])
        for vid in sorted(report.per_video):
            writer.writerow([vid, repr(report.per_video[vid]["j"]), repr(report.per_video[vid]["f"])])
        writer.writerow(["aggregate", repr(report.aggregate["j"]), repr(report.aggregate["f"])])


def save_predictions(predictions: dict[str, list[np.ndarray]], out_dir: Path) -> None:
    for vid, masks in predictions.items():
        vdir = out_dir / vid
        vdir.mkdir(parents=True, exist_ok=True)
        for t, mask in enumerate(masks):
            Image.fromarray((mask * 255).astype(np.uint8)).save(vdir / f"{t:05d}.png")


def load_predictions(pred_dir: str | Path) -> dict[str, list[np.ndarray]]:
    pred_dir = Path(pred_dir)
    out: dict[str, list[np.ndarray]] = {}
    for vdir in sorted(p for p in pred_dir.iterdir() if p.is_dir()):
        masks = []
        for fpath in sorted(vdir.glob("*.png")):
            masks.append((np.asarray(Image.open(fpath).convert("L")) > 127).astype(np.uint8))
        out[vdir.name] = masks
    return out


def epoch_curves_from_outcomes(
    outcomes: dict[str, AdaptationOutcome], dataset: list[VideoSequence]
) -> dict[str, dict[str, float]]:
    """Aggregate per-epoch masks into mean-J / mean-F curves."""
    epochs = sorted({e for o in outcomes.values() if o.per_epoch_masks for e in o.per_epoch_masks})
    curves: dict[str, dict[str, float]] = {"j": {}, "f": {}}
    for e in epochs:
        preds = {
            vid: outcomes[vid].per_epoch_masks[e]
            for vid in outcomes
            if outcomes[vid].per_epoch_masks and e in outcomes[vid].per_epoch_masks
        }
        subset = [seq for seq in dataset if seq.video_id in preds]
        report = evaluate(preds, subset)
        curves["j"][str(e)] = report.aggregate["j"]
        curves["f"][str(e)] = report.aggregate["f"]
    return curves


def run_ttt_over_videos(
    model,
    dataset: list[VideoSequence],
    cfg: ExperimentConfig,
    workers: int = 1,
) -> dict[str, AdaptationOutcome]:
    """Adapt every video independently (optionally in parallel processes)."""
    if workers <= 1 or len(dataset) <= 1:
        return {
            seq.video_id: adapt_video(model, seq, cfg.ttt, cfg.aug, cfg.loss)
            for seq in dataset
        }
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "model.ckpt"
        save_checkpoint(model, ckpt, seed=cfg.seed)
        args = [(str(ckpt), seq, cfg) for seq in dataset]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_adapt_worker, args))
    return {seq.video_id: outcome for seq, outcome in zip(dataset, results)}


def _adapt_worker(packed):
    ckpt_path, seq, cfg = packed
    torch.set_num_threads(1)
    model, _ = load_checkpoint(ckpt_path)
    return adapt_video(model, seq, cfg.ttt, cfg.aug, cfg.loss)


# ---------------------------------------------------------------------------
# full pipeline


def run_pipeline(
    config: ExperimentConfig | str | Path,
    out_dir: str | Path,
    workers: int = 1,
) -> dict:
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing: dict[str, float] = {}
    manifest: dict = {
        "config": to_flat_dict(cfg),
        "seeds": {"master": cfg.seed, "data": cfg.data.seed,
                  "train": cfg.train.seed, "ttt": cfg.ttt.seed},
        "code_version": code_version(),
        "outputs": {},
    }

    def _fail(stage: str, exc: BaseException):
        failed = out / "failed"
        failed.mkdir(exist_ok=True)
        (failed / f"{stage}_error.json").write_text(
            json.dumps({"stage": stage, "error": str(exc), "manifest": manifest}, indent=2, default=str)
        )
        raise PipelineError(stage, exc) from exc

    # data
    t0 = time.perf_counter()
    try:
        train_ds, test_ds = default_splits(cfg.data)
        manifest["input_checksums"] = {
            "train": dataset_checksum(train_ds),
            "test": dataset_checksum(test_ds),
        }
    except Exception as exc:
        _fail("data", exc)
    timing["data"] = time.perf_counter() - t0

    # stage-1 training
    t0 = time.perf_counter()
    try:
        model = init_model(cfg.model, seed=cfg.train.seed)
        model, history = train_stage1(model, train_ds, cfg.train, cfg.loss, cfg.aug)
        ckpt_path = out / "model.ckpt"
        save_checkpoint(model, ckpt_path, seed=cfg.train.seed)
        history_path = out / "history.csv"
        write_history_csv(history, history_path)
        manifest["outputs"]["checkpoint"] = str(ckpt_path)
        manifest["outputs"]["history"] = str(history_path)
    except Exception as exc:
        _fail("train", exc)
    timing["train"] = time.perf_counter() - t0

    # test-time adaptation
    t0 = time.perf_counter()
    try:
        outcomes = run_ttt_over_videos(model, test_ds, cfg, workers=workers)
        traces = {}
        for vid, outcome in outcomes.items():
            trace_path = out / f"trace_{vid}.csv"
            _write_trace_csv(outcome, trace_path)
            traces[vid] = str(trace_path)
        manifest["outputs"]["traces"] = traces
    except Exception as exc:
        _fail("ttt", exc)
    timing["ttt"] = time.perf_counter() - t0

    # evaluation + reports
    t0 = time.perf_counter()
    try:
        predictions = {vid: o.final_masks for vid, o in outcomes.items()}
        report = evaluate(predictions, test_ds)
        if cfg.ttt.track_epoch_metrics and cfg.ttt.strategy != "none":
            report.epoch_curves = epoch_curves_from_outcomes(outcomes, test_ds)
        report_json = out / "report.json"
        report_json.write_text(report.to_json())
        report_csv = out / "report.csv"
        _write_report_csv(report, report_csv)
        pred_dir = out / "predictions"
        save_predictions(predictions, pred_dir)
        manifest["outputs"]["report_json"] = str(report_json)
        manifest["outputs"]["report_csv"] = str(report_csv)
        manifest["outputs"]["predictions"] = str(pred_dir)
        manifest["metrics"] = {"aggregate": report.aggregate, "per_video": report.per_video}
    except Exception as exc:
        _fail("eval", exc)
    timing["eval"] = time.perf_counter() - t0

    manifest["timing_seconds"] = {k: round(v, 3) for k, v in timing.items()}
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    manifest["outputs"]["manifest"] = str(manifest_path)
    return manifest


def rerun_manifest(manifest_path: str | Path, out_dir: str | Path, workers: int = 1) -> dict:
    """Replay a recorded run; same seeds, same config, same report bytes."""
    manifest = json.loads(Path(manifest_path).read_text())
    cfg = apply_overrides(ExperimentConfig(), manifest["config"]).validate()
    return run_pipeline(cfg, out_dir, workers=workers)


# ---------------------------------------------------------------------------
# ablation sweeps


def _mean_scores(model, test_ds, cfg) -> dict[str, float]:
    outcomes = {seq.video_id: adapt_video(model, seq, cfg.ttt, cfg.aug, cfg.loss) for seq in test_ds}
    report = evaluate({vid: o.final_masks for vid, o in outcomes.items()}, test_ds)
    return report.aggregate


def run_ablation(kind: str, base_config: ExperimentConfig, workers: int = 1) -> list[dict]:
    """Sweep one axis and report J/F plus deltas against the no-adaptation row.

    kinds: lambda {1, 0.1, 0.01}; augmentation (leave-one-out over the seven
    types plus the full pipeline); strategy (none/n/mwi/ltv); objective
    (consistency/pseudo_depth); clips {1, 5, 10, 20}.
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; valid kinds: {', '.join(ABLATION_KINDS)}")
    cfg = replace_deep(base_config).validate()
    rows: list[dict] = []

    def pretrain(with_cfg: ExperimentConfig):
        train_ds, test_ds = default_splits(with_cfg.data)
        model = init_model(with_cfg.model, seed=with_cfg.train.seed)
        model, _ = train_stage1(model, train_ds, with_cfg.train, with_cfg.loss, with_cfg.aug)
        return model, test_ds

    if kind == "lambda":
        for lam in LAMBDA_GRID:
            variant = replace_deep(cfg)
            variant.loss.lambda_ = lam
            model, test_ds = pretrain(variant)
            base = variant
            none_cfg = replace_deep(variant)
            none_cfg.ttt.strategy = "none"
            none_scores = _mean_scores(model, test_ds, none_cfg)
            ttt_scores = _mean_scores(model, test_ds, base)
            rows.append(_row(f"lambda={lam}", ttt_scores, none_scores))
        return rows

    model, test_ds = pretrain(cfg)
    none_cfg = replace_deep(cfg)
    none_cfg.ttt.strategy = "none"
    none_scores = _mean_scores(model, test_ds, none_cfg)

    if kind == "strategy":
        for strategy in ("none", "ttt_n", "ttt_mwi", "ttt_ltv"):
            variant = replace_deep(cfg)
            variant.ttt.strategy = strategy
            rows.append(_row(strategy, _mean_scores(model, test_ds, variant), none_scores))
    elif kind == "objective":
        for objective in ("consistency", "pseudo_depth"):
            variant = replace_deep(cfg)
            variant.ttt.objective = objective
            rows.append(_row(objective, _mean_scores(model, test_ds, variant), none_scores))
    elif kind == "clips":
        for clips in CLIP_GRID:
            variant = replace_deep(cfg)
            variant.ttt.clip_sampling = clips
            rows.append(_row(f"clips={clips}", _mean_scores(model, test_ds, variant), none_scores))
    elif kind == "augmentation":
        for aug_kind in AUG_KINDS:
            variant = replace_deep(cfg)
            variant.aug = variant.aug.without(aug_kind)
            rows.append(_row(f"w/o {aug_kind}", _mean_scores(model, test_ds, variant), none_scores))
        rows.append(_row("full", _mean_scores(model, test_ds, cfg), none_scores))
    return rows


def _row(name: str, scores: dict[str, float], baseline: dict[str, float]) -> dict:
    return {
        "name": name,
        "j": scores["j"],
        "f": scores["f"],
        "delta_j": scores["j"] - baseline["j"],
        "delta_f": scores["f"] - baseline["f"],
    }


def format_ablation_table(rows: list[dict]) -> str:
    lines = [f"{'row':<18} {'J':>7} {'F':>7} {'dJ':>7} {'dF':>7}"]
    for r in rows:
        lines.append(
            f"{r['name']:<18} {100 * r['j']:>7.1f} {100 * r['f']:>7.1f} "
            f"{100 * r['delta_j']:>+7.1f} {100 * r['delta_f']:>+7.1f}"
        )
    return "\n".join(lines)


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["name", "j", "f", "delta_j", "delta_f"])
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# multi-seed directional study (the paper-style strategy comparison)

STUDY_VARIANTS = ("none", "ttt_n", "ttt_ltv", "ltv_pseudo")


def _study_pretrain_worker(packed):
    cfg, seed, train_steps, ckpt_path = packed
    torch.set_num_threads(1)
    cfg_s = cfg.reseed(seed)
    train_ds, _ = default_splits(cfg_s.data)
    model = init_model(cfg_s.model, seed=cfg_s.train.seed)
    train_cfg = replace_deep(cfg_s.train)
    train_cfg.max_steps = train_steps
    model, _ = train_stage1(model, train_ds, train_cfg, cfg_s.loss, cfg_s.aug)
    save_checkpoint(model, ckpt_path, seed=seed)
    return ckpt_path


def _study_unit_worker(packed):
    ckpt_path, seq, cfg_s, variant = packed
    torch.set_num_threads(1)
    model, _ = load_checkpoint(ckpt_path)
    ttt_cfg = replace_deep(cfg_s.ttt)
    ttt_cfg.keep_snapshots = False
    if variant == "none":
        ttt_cfg.strategy = "none"
    elif variant == "ttt_n":
        ttt_cfg.strategy = "ttt_n"
    elif variant == "ttt_ltv":
        ttt_cfg.strategy = "ttt_ltv"
    elif variant == "ltv_pseudo":
        ttt_cfg.strategy = "ttt_ltv"
        ttt_cfg.objective = "pseudo_depth"
    else:
        raise ValueError(f"unknown study variant {variant!r}")
    outcome = adapt_video(model, seq, ttt_cfg, cfg_s.aug, cfg_s.loss)
    return outcome.final_masks


def directional_study(
    cfg: ExperimentConfig,
    seeds: tuple[int, ...],
    train_steps: int = 200,
    workers: int = 2,
    variants: tuple[str, ...] = STUDY_VARIANTS,
    work_dir: str | Path | None = None,
) -> dict[int, dict[str, float]]:
    """Mean test-split J per (seed, variant); the strategy-ordering evidence.

    Per seed: generate the shifted splits, pretrain for ``train_steps``, then
    adapt each test video under every variant.  Videos are independent given
    the checkpoint, so all (seed, variant, video) units fan out over a
    process pool.
    """
    import tempfile

    owns_tmp = work_dir is None
    tmp_ctx = tempfile.TemporaryDirectory() if owns_tmp else None
    base = Path(tmp_ctx.name) if owns_tmp else Path(work_dir)
    base.mkdir(parents=True, exist_ok=True)
    try:
        pretrain_jobs = [
            (cfg, seed, train_steps, str(base / f"seed{seed}.ckpt")) for seed in seeds
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_study_pretrain_worker, pretrain_jobs))
        else:
            for job in pretrain_jobs:
                _study_pretrain_worker(job)

        units = []
        test_sets: dict[int, list[VideoSequence]] = {}
        for seed in seeds:
            cfg_s = cfg.reseed(seed)
            _, test_ds = default_splits(cfg_s.data)
            test_sets[seed] = test_ds
            for variant in variants:
                for seq in test_ds:
                    units.append((str(base / f"seed{seed}.ckpt"), seq, cfg_s, variant))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                masks_list = list(pool.map(_study_unit_worker, units))
        else:
            masks_list = [_study_unit_worker(u) for u in units]

        results: dict[int, dict[str, float]] = {seed: {} for seed in seeds}
        idx = 0
        for seed in seeds:
            test_ds = test_sets[seed]
            for variant in variants:
                preds = {}
                for seq in test_ds:
                    preds[seq.video_id] = masks_list[idx]
                    idx += 1
                results[seed][variant] = evaluate(preds, test_ds).aggregate["j"]
        return results
    finally:
        if tmp_ctx is not None:
            tmp_ctx.cleanup()
