"""Objectives: segmentation BCE, scale-invariant log depth loss, the joint
two-task objective, and the augmentation-consistency objective.

All reductions are pixel means so the depth weight keeps the same meaning at
any resolution.  The scale-invariant loss follows the square-root convention
(alpha * sqrt(E[g^2] - lambda_v * E[g]^2) with g the log residual); the
original non-root form is selectable via ``silog_variant='eigen'``.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import LossConfig
from .model import ForwardOutput


class LossError(ValueError):
    pass


#: returned by consistency_loss when the joint valid region is empty; callers
#: skip the update step instead of erroring.
SKIP = None


def _select(x: torch.Tensor, valid_mask: torch.Tensor | None) -> torch.Tensor:
    if valid_mask is None:
        return x.reshape(-1)
    if valid_mask.shape != x.shape:
        raise LossError(f"valid mask shape {tuple(valid_mask.shape)} != input {tuple(x.shape)}")
    return x[valid_mask]


def bce_loss(mask_logits: torch.Tensor, mask_gt: torch.Tensor,
             valid_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy over valid pixels, computed from logits."""
    if mask_logits.shape != mask_gt.shape:
        raise LossError(f"logits shape {tuple(mask_logits.shape)} != mask {tuple(mask_gt.shape)}")
    z = _select(mask_logits, valid_mask)
    m = _select(mask_gt.to(mask_logits.dtype), valid_mask)
    if z.numel() == 0:
        raise LossError("bce_loss: empty valid mask")
    return F.binary_cross_entropy_with_logits(z, m)


def silog_loss(depth_pred: torch.Tensor, depth_ref: torch.Tensor,
               valid_mask: torch.Tensor | None = None,
               cfg: LossConfig | None = None) -> torch.Tensor:
    """Scale-invariant log loss between positive depth maps.

    g = ln(pred + eps) - ln(ref + eps) over valid pixels;
    zoe variant: alpha * sqrt(max(E[g^2] - lambda_v * E[g]^2, 0));
    eigen variant: E[g^2] - 0.5 * E[g]^2.

    The radicand is zero exactly when g is constant (zero for lambda_v < 1),
    in which case the loss and its gradients are exactly zero; this keeps
    no-op adaptation steps from producing NaNs through sqrt'(0).
    """
    cfg = cfg or LossConfig()
    if depth_pred.shape != depth_ref.shape:
        raise LossError(f"pred shape {tuple(depth_pred.shape)} != ref {tuple(depth_ref.shape)}")
    pred = _select(depth_pred, valid_mask)
    ref = _select(depth_ref.to(depth_pred.dtype), valid_mask)
    if pred.numel() < 2:
        raise LossError("silog_loss: needs at least 2 valid pixels")
    with torch.no_grad():
        if (pred <= 0).any() or (ref <= 0).any():
            raise LossError("silog_loss: depth values must be strictly positive on the valid mask")
    g = torch.log(pred + cfg.eps_log) - torch.log(ref + cfg.eps_log)
    mean_sq = (g * g).mean()
    sq_mean = g.mean() ** 2
    if cfg.silog_variant == "eigen":
        return mean_sq - 0.5 * sq_mean
    radicand = mean_sq - cfg.silog_lambda_v * sq_mean
    if float(radicand.detach()) <= 0.0:
        # exact zero with exact-zero gradients
        return cfg.silog_alpha * (radicand * 0.0)
    return cfg.silog_alpha * torch.sqrt(radicand)


def joint_loss(output: ForwardOutput, mask_gt: torch.Tensor, depth_ref: torch.Tensor,
               cfg: LossConfig | None = None,
               valid_mask: torch.Tensor | None = None) -> tuple[torch.Tensor, dict[str, float]]:
    """bce + lambda * silog; returns (total, parts) with parts for logging."""
    cfg = cfg or LossConfig()
    bce = bce_loss(output.mask_logits, mask_gt, valid_mask)
    if cfg.lambda_ == 0.0 and output.depth is None:
        silog = torch.zeros((), dtype=bce.dtype)
    else:
        if output.depth is None:
            raise LossError("joint_loss: forward output has no depth but lambda > 0")
        silog = silog_loss(output.depth, depth_ref, valid_mask, cfg)
    total = bce + cfg.lambda_ * silog
    return total, {"bce": float(bce.detach()), "silog": float(silog.detach())}


def consistency_loss(depth1_canonical: torch.Tensor, depth2_canonical: torch.Tensor,
                     joint_valid: torch.Tensor,
                     cfg: LossConfig | None = None) -> torch.Tensor | None:
    """Scale-invariant log discrepancy between two warped depth predictions
    on their joint valid support; the first prediction plays the reference
    role.  Returns SKIP (None) on empty support so callers can skip the step.
    """
    cfg = cfg or LossConfig()
    if int(joint_valid.sum()) < 2:
        return SKIP
    ref = depth1_canonical.detach() if cfg.stop_gradient_reference else depth1_canonical
    return silog_loss(depth2_canonical, ref, joint_valid, cfg)


def pseudo_depth_loss(depth_pred: torch.Tensor, pseudo_depth: torch.Tensor,
                      valid_mask: torch.Tensor | None = None,
                      cfg: LossConfig | None = None) -> torch.Tensor:
    """Supervised variant of the test-time objective: error against the
    stored reference depth (identical to silog_loss by definition)."""
    return silog_loss(depth_pred, pseudo_depth, valid_mask, cfg)


def binary_entropy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Mean Bernoulli entropy of sigmoid(logits), numerically stable."""
    p = torch.sigmoid(logits)
    return F.binary_cross_entropy_with_logits(logits, p)
