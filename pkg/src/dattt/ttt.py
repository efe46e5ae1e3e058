"""Per-video test-time adaptation.

Three weight-update schedules over a video's frames:

* ``ttt_n``    - reset to the pretrained weights for every frame, take E
                 consecutive steps on it (frames are independent);
* ``ttt_mwi``  - frames in temporal order, E steps each, but weights carry
                 over from the previous frame after the first;
* ``ttt_ltv``  - E full passes over the video, one step per frame per pass,
                 weights carried throughout.

Each step draws a batch of independently augmented view pairs of one frame,
predicts depth for every view through the image-only path, warps both
predictions of a pair back to the canonical grid, and descends the
scale-invariant log discrepancy on the pair's joint valid region.  Only the
configured trainable components (default: the image encoder) are updated;
everything else, buffers included, stays bit-identical to the checkpoint
because adaptation forwards run with normalization in eval mode.

Optimizer moments reset whenever the weights reset to pretrained (every new
frame for ttt_n, step 0 otherwise) and carry with the weights elsewhere.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import (
    AugmentedView,
    augment_image,
    joint_validity,
    sample_geometric,
    sample_photometric,
    warp_to_canonical,
)
from .config import AugmentConfig, LossConfig, TTTConfig
from .data import VideoSequence
from .losses import SKIP, binary_entropy_from_logits, consistency_loss, pseudo_depth_loss
from .model import COMPONENTS, SegDepthNet, clone_model, snapshot


class AdaptationError(RuntimeError):
    pass


@dataclass
class TTTSchedule:
    steps: list[tuple[int, str]]          # (frame_id, "pretrained" | "carry")
    epoch_boundaries: list[int]           # step index ending each epoch group
    warnings: list[str] = field(default_factory=list)


@dataclass
class StepRecord:
    step: int
    frame_id: int
    init_source: str
    loss: float | None       # None for skipped steps
    skipped: bool
    frame_epoch: int          # how many steps this frame has received so far
    video_pass: int           # LTV-style pass counter
    wall_ms: float


@dataclass
class AdaptationTrace:
    records: list[StepRecord] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.records if r.loss is not None]


@dataclass
class AdaptationOutcome:
    snapshots: list[dict[str, torch.Tensor]]
    trace: AdaptationTrace
    final_masks: list[np.ndarray]
    per_epoch_masks: dict[int, list[np.ndarray]] | None = None


def video_rng_seed(seed: int, video_id: str) -> int:
    """Stable per-video stream so parallel execution order cannot matter."""
    return (seed * 2654435761 + zlib.crc32(video_id.encode())) % (2**31 - 1)


# ---------------------------------------------------------------------------
# schedules


def build_schedule(video: VideoSequence, cfg: TTTConfig) -> TTTSchedule:
    cfg.validate()
    t_frames = len(video)
    if t_frames == 0:
        raise AdaptationError(f"video {video.video_id}: no frames to adapt on")
    warnings: list[str] = []
    if cfg.strategy == "none":
        return TTTSchedule(steps=[], epoch_boundaries=[], warnings=warnings)

    if cfg.clip_sampling is not None:
        n_clips = cfg.clip_sampling
        if n_clips > t_frames:
            warnings.append(
                f"clip_sampling {n_clips} exceeds video length {t_frames}; clamped to {t_frames}"
            )
            n_clips = t_frames
        rng = np.random.default_rng(video_rng_seed(cfg.seed, video.video_id) ^ 0x5C11)
        frame_lists = []
        for _ in range(cfg.epochs):
            picks = []
            for k in range(n_clips):
                clip = list(range(k, t_frames, n_clips))
                picks.append(int(clip[rng.integers(len(clip))]))
            frame_lists.append(picks)
    else:
        frame_lists = None

    steps: list[tuple[int, str]] = []
    boundaries: list[int] = []
    if cfg.strategy == "ttt_ltv":
        # E passes over the video, one step per frame per pass
        for e in range(cfg.epochs):
            frames = frame_lists[e] if frame_lists is not None else list(range(t_frames))
            for f in frames:
                steps.append((f, "pretrained" if not steps else "carry"))
            boundaries.append(len(steps))
    else:
        # ttt_n / ttt_mwi: E consecutive steps per frame, temporal order
        if frame_lists is not None:
            # one step per sampled frame per epoch; epoch boundary after each sweep
            for e in range(cfg.epochs):
                for f in frame_lists[e]:
                    steps.append((f, "carry"))
                boundaries.append(len(steps))
        else:
            for f in range(t_frames):
                for _ in range(cfg.epochs):
                    steps.append((f, "carry"))
            boundaries = [len(steps)]
        if cfg.strategy == "ttt_n":
            # reset at the start of every consecutive same-frame block
            out = []
            prev_frame = None
            for f, _ in steps:
                out.append((f, "pretrained" if f != prev_frame else "carry"))
                prev_frame = f
            steps = out
        else:
            steps = [(f, "pretrained" if i == 0 else "carry") for i, (f, _) in enumerate(steps)]
    return TTTSchedule(steps=steps, epoch_boundaries=boundaries, warnings=warnings)


# ---------------------------------------------------------------------------
# inference


def predict_mask_logits(model: SegDepthNet, video: VideoSequence,
                        frames: list[int] | None = None, chunk: int = 16) -> list[torch.Tensor]:
    model.eval()
    idx = frames if frames is not None else list(range(len(video)))
    logits: list[torch.Tensor] = []
    with torch.no_grad():
        for start in range(0, len(idx), chunk):
            part = idx[start:start + chunk]
            images = torch.stack(
                [torch.from_numpy(np.ascontiguousarray(video.samples[i].image.transpose(2, 0, 1))) for i in part]
            )
            flows = torch.stack(
                [torch.from_numpy(np.ascontiguousarray(video.samples[i].flow.transpose(2, 0, 1))) for i in part]
            )
            out = model(images, flows, compute_depth=False)
            logits.extend(out.mask_logits[i] for i in range(len(part)))
    return logits


def infer_video(model: SegDepthNet, video: VideoSequence) -> list[np.ndarray]:
    """Evaluation-mode masks per frame: sigmoid(logits) > 0.5, strict."""
    return [
        (torch.sigmoid(l) > 0.5).numpy().astype(np.uint8)
        for l in predict_mask_logits(model, video)
    ]


# ---------------------------------------------------------------------------
# adaptation engine


def _trainable_params(model: SegDepthNet, trainable: tuple[str, ...]) -> list[torch.nn.Parameter]:
    params = []
    for name in trainable:
        params.extend(model.components()[name].parameters())
    return params


def _set_requires_grad(model: SegDepthNet, trainable: tuple[str, ...]) -> None:
    for name, comp in model.components().items():
        flag = name in trainable
        for p in comp.parameters():
            p.requires_grad_(flag)


def _reset_to_pretrained(model: SegDepthNet, pretrained_state: dict[str, torch.Tensor],
                         trainable: tuple[str, ...]) -> None:
    with torch.no_grad():
        current = model.state_dict()
        for key, value in pretrained_state.items():
            if key.split(".", 1)[0] in trainable:
                current[key].copy_(value)


def _group_forward_depth(model: SegDepthNet, views: list[AugmentedView]) -> list[torch.Tensor]:
    """Depth for every view; same-size views share one batched forward.

    Grouping is exact because adaptation forwards run in eval mode, where
    each sample's output is independent of its batch companions.
    """
    order: dict[tuple[int, int], list[int]] = {}
    for i, view in enumerate(views):
        order.setdefault(view.image.shape[:2], []).append(i)
    depths: list[torch.Tensor | None] = [None] * len(views)
    for size, indices in order.items():
        batch = torch.stack(
            [torch.from_numpy(np.ascontiguousarray(views[i].image.transpose(2, 0, 1))) for i in indices]
        )
        out = model.forward_depth(batch)
        for j, i in enumerate(indices):
            depths[i] = out[j]
    return depths  # type: ignore[return-value]


def _consistency_step_loss(model, sample, aug_cfg, loss_cfg, rng, batch_pairs, canonical_hw):
    pairs: list[tuple[AugmentedView, AugmentedView]] = []
    for _ in range(batch_pairs):
        g1 = sample_geometric(canonical_hw, aug_cfg, rng)
        p1 = sample_photometric(aug_cfg, rng)
        g2 = sample_geometric(canonical_hw, aug_cfg, rng)
        p2 = sample_photometric(aug_cfg, rng)
        pairs.append(
            (
                AugmentedView(augment_image(sample.image, g1, p1), g1, p1),
                AugmentedView(augment_image(sample.image, g2, p2), g2, p2),
            )
        )
    views = [v for pair in pairs for v in pair]
    depths = _group_forward_depth(model, views)
    losses = []
    for k in range(batch_pairs):
        v1, v2 = pairs[k]
        valid = joint_validity(v1.geometric, v2.geometric, canonical_hw)
        if int(valid.sum()) < 2:
            continue
        d1, _ = warp_to_canonical(depths[2 * k], v1.geometric, canonical_hw, mode="bilinear")
        d2, _ = warp_to_canonical(depths[2 * k + 1], v2.geometric, canonical_hw, mode="bilinear")
        loss = consistency_loss(d1, d2, valid, loss_cfg)
        if loss is not SKIP:
            losses.append(loss)
    if not losses:
        return SKIP
    return sum(losses) / len(losses)


def _pseudo_step_loss(model, sample, aug_cfg, loss_cfg, rng, batch_pairs, canonical_hw):
    views = []
    for _ in range(batch_pairs):
        g = sample_geometric(canonical_hw, aug_cfg, rng)
        p = sample_photometric(aug_cfg, rng)
        views.append(AugmentedView(augment_image(sample.image, g, p), g, p))
    depths = _group_forward_depth(model, views)
    ref = torch.from_numpy(sample.depth)
    losses = []
    for view, pred in zip(views, depths):
        warped, valid = warp_to_canonical(pred, view.geometric, canonical_hw, mode="bilinear")
        if int(valid.sum()) < 2:
            continue
        losses.append(pseudo_depth_loss(warped, ref, valid, loss_cfg))
    if not losses:
        return SKIP
    return sum(losses) / len(losses)


def adapt_video(
    pretrained: SegDepthNet,
    video: VideoSequence,
    cfg: TTTConfig,
    aug_cfg: AugmentConfig | None = None,
    loss_cfg: LossConfig | None = None,
) -> AdaptationOutcome:
    """Run the configured schedule on one video.

    The pretrained model is never mutated; adaptation happens on a clone.
    Returns per-epoch weight snapshots (when kept), the step trace, and the
    strategy-appropriate final masks: per-frame adapted weights for ttt_n,
    the final weights for every frame otherwise.
    """
    cfg.validate()
    aug_cfg = aug_cfg or AugmentConfig()
    loss_cfg = loss_cfg or LossConfig()
    if cfg.objective == "pseudo_depth":
        for s in video.samples:
            if s.depth is None:
                raise AdaptationError("pseudo_depth objective requires stored depth maps")

    if cfg.strategy == "none":
        return AdaptationOutcome(
            snapshots=[snapshot(pretrained)],
            trace=AdaptationTrace(),
            final_masks=infer_video(pretrained, video),
            per_epoch_masks=None,
        )

    schedule = build_schedule(video, cfg)
    model = clone_model(pretrained)
    model.eval()  # adaptation forwards keep normalization statistics frozen
    _set_requires_grad(model, cfg.trainable)
    pretrained_state = snapshot(pretrained)
    rng = np.random.default_rng(video_rng_seed(cfg.seed, video.video_id))
    canonical_hw = video.samples[0].image.shape[:2]

    optimizer = None
    trace = AdaptationTrace()
    snapshots: list[dict[str, torch.Tensor]] = []
    per_frame_final: dict[int, torch.Tensor | None] = {}
    per_epoch_masks: dict[int, list[np.ndarray]] | None = (
        {} if cfg.track_epoch_metrics else None
    )
    online = cfg.strategy == "ttt_n" or (cfg.strategy == "ttt_mwi" and cfg.online_inference)
    frame_steps: dict[int, int] = {}
    online_epoch_logits: dict[int, dict[int, torch.Tensor]] = {}

    boundary_set = set(schedule.epoch_boundaries)
    step_obj = _consistency_step_loss if cfg.objective == "consistency" else _pseudo_step_loss

    for step_idx, (frame_id, init_source) in enumerate(schedule.steps):
        t0 = time.perf_counter()
        if init_source == "pretrained":
            _reset_to_pretrained(model, pretrained_state, cfg.trainable)
            optimizer = torch.optim.Adam(
                _trainable_params(model, cfg.trainable), lr=cfg.learning_rate
            )
        assert optimizer is not None
        sample = video.samples[frame_id]
        loss = step_obj(model, sample, aug_cfg, loss_cfg, rng, cfg.batch_pairs, canonical_hw)
        if loss is SKIP:
            skipped, loss_val = True, None
        else:
            if not torch.isfinite(loss):
                raise AdaptationError(
                    f"video {video.video_id}: non-finite adaptation loss at step {step_idx}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(_trainable_params(model, cfg.trainable), cfg.grad_clip)
            optimizer.step()
            skipped, loss_val = False, float(loss.detach())

        frame_steps[frame_id] = frame_steps.get(frame_id, 0) + 1
        frame_epoch = frame_steps[frame_id]
        video_pass = next(
            (i + 1 for i, b in enumerate(schedule.epoch_boundaries) if step_idx < b), 1
        )
        trace.records.append(
            StepRecord(
                step=step_idx, frame_id=frame_id, init_source=init_source,
                loss=loss_val, skipped=skipped, frame_epoch=frame_epoch,
                video_pass=video_pass, wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
        )

        if online:
            # per-frame prediction after this frame's e-th step
            is_last_of_block = (
                step_idx + 1 == len(schedule.steps)
                or schedule.steps[step_idx + 1][0] != frame_id
            )
            if cfg.track_epoch_metrics:
                logits = predict_mask_logits(model, video, frames=[frame_id])[0]
                online_epoch_logits.setdefault(frame_epoch, {})[frame_id] = logits
            elif is_last_of_block:
                logits = predict_mask_logits(model, video, frames=[frame_id])[0]
            if is_last_of_block:
                per_frame_final[frame_id] = logits

        if step_idx + 1 in boundary_set:
            epoch_no = schedule.epoch_boundaries.index(step_idx + 1) + 1
            if cfg.keep_snapshots:
                snapshots.append(snapshot(model))
            if cfg.track_epoch_metrics and not online:
                per_epoch_masks[epoch_no] = infer_video(model, video)

    if not snapshots:
        snapshots = [snapshot(model)]
    if cfg.track_epoch_metrics and online:
        for e, by_frame in online_epoch_logits.items():
            per_epoch_masks[e] = [
                (torch.sigmoid(by_frame[f]) > 0.5).numpy().astype(np.uint8)
                if f in by_frame
                else np.zeros(canonical_hw, dtype=np.uint8)
                for f in range(len(video))
            ]

    if online:
        final_masks = []
        fallback = None
        for f in range(len(video)):
            logit = per_frame_final.get(f)
            if logit is None:
                if fallback is None:
                    fallback = infer_video(model, video)
                final_masks.append(fallback[f])
            else:
                final_masks.append((torch.sigmoid(logit) > 0.5).numpy().astype(np.uint8))
    else:
        final_masks = infer_video(model, video)

    return AdaptationOutcome(
        snapshots=snapshots, trace=trace, final_masks=final_masks, per_epoch_masks=per_epoch_masks
    )


# ---------------------------------------------------------------------------
# baseline adapters


def _norm_affine_params(model: SegDepthNet) -> list[torch.nn.Parameter]:
    params = []
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            params.extend([m.weight, m.bias])
    return params


def tent_adapt(
    pretrained: SegDepthNet, video: VideoSequence, cfg: TTTConfig
) -> tuple[SegDepthNet, AdaptationTrace]:
    """Entropy-minimization baseline: descend the mean Bernoulli entropy of
    the mask prediction, updating only normalization affine parameters.
    Shares the schedule machinery; forwards use stored statistics so running
    moments stay at the checkpoint values."""
    cfg.validate()
    schedule = build_schedule(video, cfg)
    model = clone_model(pretrained)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    affine = _norm_affine_params(model)
    for p in affine:
        p.requires_grad_(True)
    pretrained_state = snapshot(pretrained)
    affine_keys = {
        name for name, m in model.named_modules() if isinstance(m, torch.nn.BatchNorm2d)
    }

    def reset():
        with torch.no_grad():
            current = model.state_dict()
            for key, value in pretrained_state.items():
                parent = key.rsplit(".", 1)[0]
                if parent in affine_keys and key.endswith(("weight", "bias")):
                    current[key].copy_(value)
        return torch.optim.Adam(affine, lr=cfg.learning_rate)

    optimizer = None
    trace = AdaptationTrace()
    for step_idx, (frame_id, init_source) in enumerate(schedule.steps):
        t0 = time.perf_counter()
        if init_source == "pretrained":
            optimizer = reset()
        assert optimizer is not None
        s = video.samples[frame_id]
        image = torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1)))[None]
        flow = torch.from_numpy(np.ascontiguousarray(s.flow.transpose(2, 0, 1)))[None]
        out = model(image, flow, compute_depth=False)
        loss = binary_entropy_from_logits(out.mask_logits)
        if not torch.isfinite(loss):
            raise AdaptationError(f"video {video.video_id}: non-finite entropy at step {step_idx}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        trace.records.append(
            StepRecord(
                step=step_idx, frame_id=frame_id, init_source=init_source, loss=float(loss.detach()),
                skipped=False, frame_epoch=0, video_pass=0,
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
        )
    return model, trace


def bn_stats_adapt(pretrained: SegDepthNet, video: VideoSequence) -> SegDepthNet:
    """Replace normalization running statistics with the test video's batch
    moments (one train-mode pass over all frames; no gradient steps)."""
    model = clone_model(pretrained)
    images = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1))) for s in video.samples]
    )
    flows = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.flow.transpose(2, 0, 1))) for s in video.samples]
    )
    momenta = {}
    for name, m in model.named_modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            momenta[name] = m.momentum
            m.momentum = 1.0  # running stats become exactly this batch's moments
    model.train()
    with torch.no_grad():
        model(images, flows, compute_depth=True)
    model.eval()
    for name, m in model.named_modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.momentum = momenta[name]
    return model
