"""Region similarity (Jaccard) and region F-measure, with per-frame,
per-video, and dataset aggregation.

Empty-mask conventions: both masks empty scores 1.0; exactly one empty
scores 0.0.  The F-measure is the harmonic mean of region precision and
recall (equivalently Dice), which dominates Jaccard for every mask pair.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import VideoSequence


class EvaluationError(ValueError):
    pass


def _check_pair(mask_gt: np.ndarray, mask_pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if mask_gt.shape != mask_pred.shape:
        raise EvaluationError(f"mask shapes differ: {mask_gt.shape} vs {mask_pred.shape}")
    return mask_gt.astype(bool), mask_pred.astype(bool)


def jaccard(mask_gt: np.ndarray, mask_pred: np.ndarray) -> float:
    gt, pred = _check_pair(mask_gt, mask_pred)
    union = int(np.logical_or(gt, pred).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(gt, pred).sum())
    return inter / union


def f_measure(mask_gt: np.ndarray, mask_pred: np.ndarray) -> float:
    gt, pred = _check_pair(mask_gt, mask_pred)
    n_gt, n_pred = int(gt.sum()), int(pred.sum())
    if n_gt == 0 and n_pred == 0:
        return 1.0
    if n_gt == 0 or n_pred == 0:
        return 0.0
    inter = int(np.logical_and(gt, pred).sum())
    p = inter / n_pred
    r = inter / n_gt
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r)


@dataclass
class FrameScore:
    video_id: str
    frame_index: int
    j: float
    f: float


@dataclass
class MetricsReport:
    per_frame: list[FrameScore]
    per_video: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    epoch_curves: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {
            "per_frame": [asdict(s) for s in self.per_frame],
            "per_video": self.per_video,
            "aggregate": self.aggregate,
            "epoch_curves": self.epoch_curves,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_jsonable(), indent=2, sort_keys=True)


def evaluate(
    predictions: dict[str, list[np.ndarray]],
    dataset: list[VideoSequence],
    annotated_only: bool = True,
) -> MetricsReport:
    """Score predictions against a dataset.

    ``predictions[video_id]`` holds one mask per frame (indexable by frame
    number).  Frames without annotation are skipped when ``annotated_only``;
    a missing prediction for an annotated frame is an error.
    """
    per_frame: list[FrameScore] = []
    per_video: dict[str, dict[str, float]] = {}
    for seq in dataset:
        if seq.video_id not in predictions:
            raise EvaluationError(f"no predictions for video {seq.video_id}")
        preds = predictions[seq.video_id]
        frames = sorted(seq.annotated_indices) if annotated_only else list(range(len(seq)))
        if not frames:
            raise EvaluationError(f"video {seq.video_id} has no frames to evaluate")
        js, fs = [], []
        for t in frames:
            if t >= len(preds) or preds[t] is None:
                raise EvaluationError(f"missing prediction for {seq.video_id} frame {t}")
            j = jaccard(seq.samples[t].mask, preds[t])
            f = f_measure(seq.samples[t].mask, preds[t])
            per_frame.append(FrameScore(seq.video_id, t, j, f))
            js.append(j)
            fs.append(f)
        per_video[seq.video_id] = {"j": float(np.mean(js)), "f": float(np.mean(fs))}
    aggregate = {
        "j": float(np.mean([v["j"] for v in per_video.values()])),
        "f": float(np.mean([v["f"] for v in per_video.values()])),
    }
    return MetricsReport(per_frame=per_frame, per_video=per_video, aggregate=aggregate)


def mean_j(predictions: dict[str, list[np.ndarray]], dataset: list[VideoSequence]) -> float:
    return evaluate(predictions, dataset).aggregate["j"]
