"""Miniature two-stream segmentation network with a depth head and
depth-conditioned feature modulation.

Five named components partition every learnable parameter:

* ``image_encoder`` / ``flow_encoder`` - 4-stage strided conv pyramids at
  strides (4, 8, 16, 32) with widths (C, 2C, 4C, 8C);
* ``mask_decoder`` - consumes the summed image+flow pyramid;
* ``depth_decoder`` - consumes the image pyramid only, so depth predictions
  never depend on flow;
* ``modulation`` - per-scale scale/shift conditioning of mask-decoder
  features on depth-decoder features, zero-initialized so it is the identity
  at init.

The partition is what test-time adaptation freezes against, so it must stay
total and disjoint; ``component_of`` maps any parameter name to its owner.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, config_as_jsonable

COMPONENTS = ("image_encoder", "flow_encoder", "mask_decoder", "depth_decoder", "modulation")

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(RuntimeError):
    """Version or config mismatch, or a malformed archive."""


@dataclass
class ForwardOutput:
    mask_logits: torch.Tensor | None   # B x H x W
    depth_raw: torch.Tensor | None     # B x H x W
    depth: torch.Tensor | None         # B x H x W, strictly positive
    decoder_features: dict[str, list[torch.Tensor]]


class PyramidEncoder(nn.Module):
    """Strided conv stack; stage i output has stride 2**(i+2) and width C*2**i."""

    def __init__(self, in_channels: int, base_width: int, momentum: float):
        super().__init__()
        c = base_width

        def block(cin, cout, stride):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride, 1),
                nn.BatchNorm2d(cout, momentum=momentum),
                nn.ReLU(inplace=True),
            )

        self.stage1 = nn.Sequential(block(in_channels, c, 2), block(c, c, 2))
        self.stage2 = block(c, 2 * c, 2)
        self.stage3 = block(2 * c, 4 * c, 2)
        self.stage4 = block(4 * c, 8 * c, 2)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        l1 = self.stage1(x)
        l2 = self.stage2(l1)
        l3 = self.stage3(l2)
        l4 = self.stage4(l3)
        return [l1, l2, l3, l4]


class FusionDecoder(nn.Module):
    """Per-scale 1x1 projection to a common width, upsample-and-sum fusion,
    then a small prediction head."""

    def __init__(self, base_width: int, decoder_width: int, momentum: float):
        super().__init__()
        widths = [base_width * m for m in (1, 2, 4, 8)]
        self.proj = nn.ModuleList(nn.Conv2d(w, decoder_width, 1) for w in widths)
        self.head = nn.Sequential(
            nn.Conv2d(decoder_width, decoder_width, 3, 1, 1),
            nn.BatchNorm2d(decoder_width, momentum=momentum),
            nn.ReLU(inplace=True),
            nn.Conv2d(decoder_width, 1, 1),
        )

    def project(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        return [p(l) for p, l in zip(self.proj, levels)]

    def fuse(self, feats: list[torch.Tensor], out_hw: tuple[int, int]) -> torch.Tensor:
        base = feats[0].shape[-2:]
        fused = feats[0]
        for f in feats[1:]:
            fused = fused + F.interpolate(f, size=base, mode="bilinear", align_corners=False)
        out = self.head(fused)
        return F.interpolate(out, size=out_hw, mode="bilinear", align_corners=False)


class ScaleShiftModulation(nn.Module):
    """Condition a mask feature on the matching depth feature.

    concat -> 1x1 -> ReLU -> 1x1 (zero-init) -> split into (dgamma, beta);
    output = (1 + dgamma) * mask_feat + beta, the identity at initialization.
    """

    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Conv2d(2 * width, 2 * width, 1)
        self.fc2 = nn.Conv2d(2 * width, 2 * width, 1)
        self.width = width

    def forward(self, mask_feat: torch.Tensor, depth_feat: torch.Tensor) -> torch.Tensor:
        if mask_feat.shape != depth_feat.shape:
            raise ModelError(
                f"modulation features disagree: {tuple(mask_feat.shape)} vs {tuple(depth_feat.shape)}"
            )
        if mask_feat.shape[1] != self.width:
            raise ModelError(f"modulation expects width {self.width}, got {mask_feat.shape[1]}")
        h = self.fc2(F.relu(self.fc1(torch.cat([mask_feat, depth_feat], dim=1))))
        dgamma, beta = h[:, : self.width], h[:, self.width:]
        return (1.0 + dgamma) * mask_feat + beta


class SegDepthNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        m = cfg.norm_momentum
        self.image_encoder = PyramidEncoder(cfg.image_channels, cfg.base_width, m)
        self.flow_encoder = PyramidEncoder(cfg.flow_channels, cfg.base_width, m)
        self.mask_decoder = FusionDecoder(cfg.base_width, cfg.decoder_width, m)
        self.depth_decoder = FusionDecoder(cfg.base_width, cfg.decoder_width, m)
        self.modulation = nn.ModuleList(ScaleShiftModulation(cfg.decoder_width) for _ in range(4))

    def components(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in COMPONENTS}

    def encode_image(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.image_encoder(image)

    def forward_depth(self, image: torch.Tensor) -> torch.Tensor:
        """Depth from the image stream only (the test-time objective path)."""
        levels = self.image_encoder(image)
        raw = self.depth_decoder.fuse(self.depth_decoder.project(levels), image.shape[-2:])
        return F.softplus(raw.squeeze(1)) + self.cfg.depth_eps

    def forward(
        self,
        image: torch.Tensor,
        flow: torch.Tensor | None,
        use_modulation: bool | None = None,
        compute_mask: bool = True,
        compute_depth: bool = True,
    ) -> ForwardOutput:
        if use_modulation is None:
            use_modulation = self.cfg.use_modulation
        if image.dim() != 4 or image.shape[1] != self.cfg.image_channels:
            raise ModelError(f"image must be Bx{self.cfg.image_channels}xHxW, got {tuple(image.shape)}")
        if compute_mask:
            if flow is None:
                raise ModelError("mask prediction requires a flow input")
            if flow.shape[0] != image.shape[0] or flow.shape[-2:] != image.shape[-2:]:
                raise ModelError(f"flow shape {tuple(flow.shape)} does not match image {tuple(image.shape)}")
        out_hw = image.shape[-2:]
        img_levels = self.image_encoder(image)

        depth_raw = depth = None
        depth_feats: list[torch.Tensor] = []
        if compute_depth or use_modulation:
            depth_feats = self.depth_decoder.project(img_levels)
            if compute_depth:
                depth_raw = self.depth_decoder.fuse(depth_feats, out_hw).squeeze(1)
                depth = F.softplus(depth_raw) + self.cfg.depth_eps

        mask_logits = None
        mask_feats: list[torch.Tensor] = []
        if compute_mask:
            flow_levels = self.flow_encoder(flow)
            fused_levels = [i + f for i, f in zip(img_levels, flow_levels)]
            mask_feats = self.mask_decoder.project(fused_levels)
            if use_modulation:
                mask_feats = [m(mf, df) for m, mf, df in zip(self.modulation, mask_feats, depth_feats)]
            mask_logits = self.mask_decoder.fuse(mask_feats, out_hw).squeeze(1)

        return ForwardOutput(
            mask_logits=mask_logits,
            depth_raw=depth_raw,
            depth=depth,
            decoder_features={"mask": mask_feats, "depth": depth_feats},
        )


def component_of(param_name: str) -> str:
    head = param_name.split(".", 1)[0]
    if head not in COMPONENTS:
        raise ModelError(f"parameter {param_name!r} belongs to no component")
    return head


def _fan_in(weight: torch.Tensor) -> int:
    return weight.shape[1] * (weight.shape[2] * weight.shape[3] if weight.dim() == 4 else 1)


def init_model(cfg: ModelConfig, seed: int) -> SegDepthNet:
    """Deterministic construction: identical (cfg, seed) gives bit-identical
    parameters.  The last modulation layer is zeroed (identity at init)."""
    model = SegDepthNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    for name, module in model.named_modules():
        if isinstance(module, nn.Conv2d):
            if ".fc2" in name:
                nn.init.zeros_(module.weight)
            else:
                std = math.sqrt(2.0 / _fan_in(module.weight))
                with torch.no_grad():
                    module.weight.normal_(0.0, std, generator=gen)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# state snapshots


def snapshot(model: SegDepthNet) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def load_snapshot(model: SegDepthNet, state: dict[str, torch.Tensor]) -> None:
    model.load_state_dict(state)


def clone_model(model: SegDepthNet) -> SegDepthNet:
    twin = SegDepthNet(model.cfg)
    twin.load_state_dict(snapshot(model))
    twin.eval()
    return twin


# ---------------------------------------------------------------------------
# checkpoints: zip of header.json + raw little-endian tensors


_DTYPES = {"float32": "<f4", "int64": "<i8"}


def save_checkpoint(model: SegDepthNet, path: str | Path, seed: int = 0) -> None:
    state = model.state_dict()
    components: dict[str, list[str]] = {name: [] for name in COMPONENTS}
    for pname, _ in model.named_parameters():
        components[component_of(pname)].append(pname)
    tensors_meta = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy()
            dtype = "int64" if arr.dtype == np.int64 else "float32"
            arr = arr.astype(_DTYPES[dtype])
            tensors_meta[name] = {"shape": list(arr.shape), "dtype": dtype}
            zf.writestr(f"tensors/{name}.bin", arr.tobytes())
        header = {
            "format_version": CHECKPOINT_VERSION,
            "config": config_as_jsonable(model.cfg),
            "seed": seed,
            "components": components,
            "tensors": tensors_meta,
        }
        zf.writestr("header.json", json.dumps(header, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> tuple[SegDepthNet, int]:
    with zipfile.ZipFile(path, "r") as zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing header.json") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: format version {header.get('format_version')} != {CHECKPOINT_VERSION}"
            )
        stored_cfg = ModelConfig(**header["config"])
        if config is not None and config_as_jsonable(config) != header["config"]:
            raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
        model = SegDepthNet(stored_cfg)
        state = {}
        for name, meta in header["tensors"].items():
            raw = zf.read(f"tensors/{name}.bin")
            arr = np.frombuffer(raw, dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"]).copy()
            state[name] = torch.from_numpy(arr)
        model.load_state_dict(state)
        model.eval()
        return model, int(header["seed"])
