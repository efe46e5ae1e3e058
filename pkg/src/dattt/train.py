"""Stage-1 joint optimization of segmentation and depth on the training split.

Batches draw frames i.i.d. across all training videos.  One geometric shape
(scale + crop size) is drawn per batch so samples stack into a single tensor;
flips, crop origins, and photometric jitter stay per-sample.  Determinism:
all randomness comes from one seeded generator, so identical configs yield
bit-identical final parameters.
"""

from __future__ import annotations

import numpy as np
import torch

from .augment import GeometricRecord, augment_sample, sample_geometric, sample_photometric
from .config import AugmentConfig, LossConfig, TrainConfig
from .data import VideoSequence
from .losses import joint_loss
from .model import SegDepthNet


class TrainingError(RuntimeError):
    pass


def _batch_records(hw: tuple[int, int], aug_cfg: AugmentConfig, rng: np.random.Generator,
                   batch: int) -> list[tuple[GeometricRecord, object]]:
    """Per-sample records sharing one (scale, crop size) so the batch stacks."""
    base = sample_geometric(hw, aug_cfg, rng)
    records = []
    for _ in range(batch):
        flip = bool(aug_cfg.hflip.enabled and rng.random() < aug_cfg.hflip.prob)
        (hr, wr), (ch, cw) = base.resized_hw, base.crop_size
        r0 = int(rng.integers(0, hr - ch + 1)) if aug_cfg.crop.enabled else base.crop_origin[0]
        c0 = int(rng.integers(0, wr - cw + 1)) if aug_cfg.crop.enabled else base.crop_origin[1]
        grec = GeometricRecord(
            hflip=flip, scale=base.scale, input_hw=base.input_hw, resized_hw=base.resized_hw,
            crop_origin=(r0, c0), crop_size=base.crop_size, output_hw=base.output_hw,
        )
        records.append((grec, sample_photometric(aug_cfg, rng)))
    return records


def _assemble_batch(dataset, flat_index, picks, aug_cfg, rng, augment: bool):
    images, flows, masks, depths = [], [], [], []
    frame_ids = []
    hw = dataset[0].samples[0].image.shape[:2]
    records = (
        _batch_records(hw, aug_cfg, rng, len(picks))
        if augment else [(None, None)] * len(picks)
    )
    for (vi, fi), (grec, prec) in zip((flat_index[p] for p in picks), records):
        s = dataset[vi].samples[fi]
        frame_ids.append(f"{dataset[vi].video_id}:{fi}")
        if grec is None:
            arrs = {"image": s.image, "flow": s.flow, "depth": s.depth, "mask": s.mask}
        else:
            arrs = augment_sample(s.image, s.flow, s.depth, s.mask, grec, prec)
        images.append(torch.from_numpy(np.ascontiguousarray(arrs["image"].transpose(2, 0, 1))))
        flows.append(torch.from_numpy(np.ascontiguousarray(arrs["flow"].transpose(2, 0, 1))))
        masks.append(torch.from_numpy(arrs["mask"].astype(np.float32)))
        depths.append(torch.from_numpy(arrs["depth"].astype(np.float32)))
    return (
        torch.stack(images), torch.stack(flows), torch.stack(masks), torch.stack(depths), frame_ids
    )


def train_stage1(
    model: SegDepthNet,
    dataset: list[VideoSequence],
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    aug_cfg: AugmentConfig | None = None,
) -> tuple[SegDepthNet, list[dict]]:
    """Optimize all five components jointly; returns the model and a history
    of per-step losses (one row per step: step, epoch, bce, silog, joint, lr).
    """
    cfg.validate()
    loss_cfg = loss_cfg or LossConfig()
    aug_cfg = aug_cfg or AugmentConfig()
    if not dataset:
        raise TrainingError("train_stage1: empty dataset")
    if cfg.epochs == 0 or cfg.max_steps == 0:
        return model, []

    flat_index = [(vi, fi) for vi, seq in enumerate(dataset) for fi in range(len(seq))]
    if len(flat_index) < cfg.batch_size:
        raise TrainingError("train_stage1: fewer frames than one batch")
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
    )
    # skip the depth path entirely when it can receive no gradient, so its
    # normalization buffers also stay untouched
    need_depth = loss_cfg.lambda_ > 0 or model.cfg.use_modulation

    history: list[dict] = []
    step = 0
    steps_per_epoch = len(flat_index) // cfg.batch_size
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(flat_index))
        for b in range(steps_per_epoch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                model.eval()
                return model, history
            picks = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            images, flows, masks, depths, frame_ids = _assemble_batch(
                dataset, flat_index, picks, aug_cfg, rng, cfg.augment
            )
            output = model(images, flows, compute_depth=need_depth)
            total, parts = joint_loss(output, masks, depths, loss_cfg)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at step {step} (batch: {', '.join(frame_ids)})"
                )
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            history.append(
                {
                    "step": step, "epoch": epoch, "bce": parts["bce"],
                    "silog": parts["silog"], "joint": float(total.detach()), "lr": cfg.learning_rate,
                }
            )
            step += 1
    model.eval()
    return model, history


def finetune(
    model: SegDepthNet,
    dataset: list[VideoSequence],
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    aug_cfg: AugmentConfig | None = None,
) -> tuple[SegDepthNet, list[dict]]:
    """Continue stage-1 optimization from a checkpointed model; same loop."""
    return train_stage1(model, dataset, cfg, loss_cfg, aug_cfg)


def write_history_csv(history: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "epoch", "bce", "silog", "joint", "lr"])
        writer.writeheader()
        writer.writerows(history)
