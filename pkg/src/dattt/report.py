"""Rendering: J/F-versus-epoch curves and mask-overlay strips."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .data import VideoSequence
from .metrics import MetricsReport

OVERLAY_TINT = np.array([1.0, 0.3, 0.2], dtype=np.float32)


def plot_epoch_curves(curves: dict[str, dict[str, float]], out_path: str | Path,
                      title: str = "adaptation epochs") -> None:
    """curves: {metric or strategy label: {epoch: value}}."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, series in sorted(curves.items()):
        epochs = sorted(series, key=lambda k: int(k))
        ax.plot([int(e) for e in epochs], [series[e] for e in epochs], marker="o", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("score")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def overlay_mask(image: np.ndarray, mask: np.ndarray, dim: float = 0.35) -> np.ndarray:
    """Dim the background and tint the predicted region."""
    out = image.astype(np.float32) * dim
    sel = mask.astype(bool)
    out[sel] = 0.6 * image[sel] + 0.4 * OVERLAY_TINT
    return np.clip(out, 0.0, 1.0)


def overlay_strip(video: VideoSequence, masks: list[np.ndarray], out_path: str | Path,
                  max_frames: int = 8) -> None:
    """A horizontal strip of overlayed frames sampled evenly from the video."""
    t = len(video)
    picks = sorted({int(round(i)) for i in np.linspace(0, t - 1, min(max_frames, t))})
    tiles = [overlay_mask(video.samples[i].image, masks[i]) for i in picks]
    strip = np.concatenate(tiles, axis=1)
    Image.fromarray((strip * 255.0 + 0.5).astype(np.uint8)).save(out_path)


def render_report(report: MetricsReport, dataset: list[VideoSequence],
                  predictions: dict[str, list[np.ndarray]], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if report.epoch_curves:
        path = out_dir / "epoch_curves.png"
        plot_epoch_curves(report.epoch_curves, path)
        written.append(path)
    for seq in dataset:
        if seq.video_id in predictions:
            path = out_dir / f"overlay_{seq.video_id}.png"
            overlay_strip(seq, predictions[seq.video_id], path)
            written.append(path)
    return written
