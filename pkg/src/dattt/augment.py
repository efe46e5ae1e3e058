"""Invertible augmentation: flip, resize, crop, photometric jitter, with the
records needed to warp per-view predictions back onto the original pixel grid.

Geometric composition order is fixed (flip, then resize, then crop) so every
view's pixels map to canonical coordinates by a closed-form inverse.  The
warp-back marks pixels whose preimage falls outside the crop (or, for
nearest-neighbor, pixels destroyed by downsampling) as invalid; consistency
objectives are evaluated only on the joint valid region of a view pair.

Index conventions follow align_corners=False resampling: output pixel i of a
resize from N to M samples source coordinate (i + 0.5) * N / M - 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import AugmentConfig


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class GeometricRecord:
    hflip: bool
    scale: float
    input_hw: tuple[int, int]
    resized_hw: tuple[int, int]
    crop_origin: tuple[int, int]   # (row, col) in resized coordinates
    crop_size: tuple[int, int]
    output_hw: tuple[int, int]     # equals crop_size

    def validate(self) -> "GeometricRecord":
        (hr, wr), (r0, c0), (h, w) = self.resized_hw, self.crop_origin, self.crop_size
        if self.scale <= 0:
            raise AugmentError("resize scale must be positive")
        if r0 < 0 or c0 < 0 or r0 + h > hr or c0 + w > wr:
            raise AugmentError("crop rectangle must lie inside the resized image")
        if self.output_hw != self.crop_size:
            raise AugmentError("output size must equal the crop size")
        return self

    @property
    def is_identity(self) -> bool:
        return (
            not self.hflip
            and self.resized_hw == self.input_hw
            and self.crop_origin == (0, 0)
            and self.crop_size == self.input_hw
        )


@dataclass(frozen=True)
class PhotometricRecord:
    brightness_delta: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue_shift: float = 0.0  # turns

    def validate(self) -> "PhotometricRecord":
        if self.contrast <= 0 or self.saturation <= 0:
            raise AugmentError("contrast and saturation factors must be strictly positive")
        if not -0.5 < self.hue_shift <= 0.5:
            raise AugmentError("hue shift must lie in (-0.5, 0.5] turns")
        return self

    @property
    def is_identity(self) -> bool:
        return (
            self.brightness_delta == 0.0
            and self.contrast == 1.0
            and self.saturation == 1.0
            and self.hue_shift == 0.0
        )


IDENTITY_PHOTOMETRIC = PhotometricRecord()


@dataclass
class AugmentedView:
    image: np.ndarray  # H' x W' x 3 float32
    geometric: GeometricRecord
    photometric: PhotometricRecord


def identity_record(hw: tuple[int, int]) -> GeometricRecord:
    return GeometricRecord(
        hflip=False, scale=1.0, input_hw=hw, resized_hw=hw,
        crop_origin=(0, 0), crop_size=hw, output_hw=hw,
    )


# ---------------------------------------------------------------------------
# sampling


def _snap_down(value: float, snap: int, lo: int, hi: int) -> int:
    snapped = int(value // snap) * snap
    return max(lo, min(snapped, hi))


def sample_geometric(input_hw: tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator) -> GeometricRecord:
    cfg.validate()
    h, w = input_hw
    flip = bool(cfg.hflip.enabled and rng.random() < cfg.hflip.prob)
    scale = float(rng.uniform(cfg.resize.scale_min, cfg.resize.scale_max)) if cfg.resize.enabled else 1.0
    resized = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    if cfg.crop.enabled:
        side = float(np.sqrt(cfg.crop.area_fraction))
        ch = _snap_down(side * resized[0], cfg.crop.snap, min(cfg.crop.snap, resized[0]), resized[0])
        cw = _snap_down(side * resized[1], cfg.crop.snap, min(cfg.crop.snap, resized[1]), resized[1])
        r0 = int(rng.integers(0, resized[0] - ch + 1))
        c0 = int(rng.integers(0, resized[1] - cw + 1))
        crop_origin, crop_size = (r0, c0), (ch, cw)
    else:
        crop_origin, crop_size = (0, 0), resized
    return GeometricRecord(
        hflip=flip, scale=scale, input_hw=(h, w), resized_hw=resized,
        crop_origin=crop_origin, crop_size=crop_size, output_hw=crop_size,
    ).validate()


def sample_photometric(cfg: AugmentConfig, rng: np.random.Generator) -> PhotometricRecord:
    cfg.validate()
    return PhotometricRecord(
        brightness_delta=float(rng.uniform(-cfg.brightness.max_delta, cfg.brightness.max_delta))
        if cfg.brightness.enabled else 0.0,
        contrast=float(rng.uniform(cfg.contrast.lo, cfg.contrast.hi)) if cfg.contrast.enabled else 1.0,
        saturation=float(rng.uniform(cfg.saturation.lo, cfg.saturation.hi)) if cfg.saturation.enabled else 1.0,
        hue_shift=float(rng.uniform(-cfg.hue.max_shift, cfg.hue.max_shift)) if cfg.hue.enabled else 0.0,
    ).validate()


# ---------------------------------------------------------------------------
# forward application


def _nearest_indices(src_len: int, dst_len: int) -> torch.Tensor:
    i = torch.arange(dst_len, dtype=torch.float64)
    idx = torch.floor((i + 0.5) * src_len / dst_len).long()
    return idx.clamp_(max=src_len - 1)


def _resize(x: torch.Tensor, size: tuple[int, int], mode: str) -> torch.Tensor:
    if tuple(x.shape[-2:]) == size:
        return x
    if mode == "nearest":
        ri = _nearest_indices(x.shape[-2], size[0])
        ci = _nearest_indices(x.shape[-1], size[1])
        return x.index_select(-2, ri).index_select(-1, ci)
    return F.interpolate(x.unsqueeze(0), size=size, mode="bilinear", align_corners=False).squeeze(0)


def geometric_apply(x: torch.Tensor, rec: GeometricRecord, mode: str = "bilinear",
                    is_flow: bool = False) -> torch.Tensor:
    """Apply flip -> resize -> crop to a C x H x W map.

    Flow maps get their column component negated under hflip and both
    components rescaled by the realized resize factors.
    """
    if tuple(x.shape[-2:]) != rec.input_hw:
        raise AugmentError(f"input size {tuple(x.shape[-2:])} does not match record {rec.input_hw}")
    if rec.hflip:
        x = torch.flip(x, dims=[-1])
        if is_flow:
            x = torch.stack([x[0], -x[1]], dim=0)
    out = _resize(x, rec.resized_hw, mode)
    if is_flow and rec.resized_hw != rec.input_hw:
        sr = rec.resized_hw[0] / rec.input_hw[0]
        sc = rec.resized_hw[1] / rec.input_hw[1]
        out = torch.stack([out[0] * sr, out[1] * sc], dim=0)
    (r0, c0), (h, w) = rec.crop_origin, rec.crop_size
    return out[..., r0:r0 + h, c0:c0 + w]


_YIQ_FROM_RGB = np.array(
    [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=np.float64
)
_RGB_FROM_YIQ = np.linalg.inv(_YIQ_FROM_RGB)
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def photometric_apply(image: np.ndarray, rec: PhotometricRecord) -> np.ndarray:
    """Apply brightness -> contrast -> saturation -> hue to an HxWx3 image.

    Ops whose parameter equals the identity are skipped outright so a fully
    disabled pipeline returns the input bit-identically.
    """
    rec.validate()
    if rec.is_identity:
        return image
    out = image.astype(np.float32)
    if rec.brightness_delta != 0.0:
        out = out + np.float32(rec.brightness_delta)
    if rec.contrast != 1.0:
        out = (out - 0.5) * np.float32(rec.contrast) + 0.5
    if rec.saturation != 1.0:
        gray = (out @ _LUMA)[..., None]
        out = gray + (out - gray) * np.float32(rec.saturation)
    if rec.hue_shift != 0.0:
        theta = 2.0 * np.pi * rec.hue_shift
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        rot = np.array([[1, 0, 0], [0, cos_t, -sin_t], [0, sin_t, cos_t]])
        m = (_RGB_FROM_YIQ @ rot @ _YIQ_FROM_RGB).astype(np.float32)
        out = out @ m.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_image(image: np.ndarray, grec: GeometricRecord, prec: PhotometricRecord) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    if not grec.is_identity:
        x = geometric_apply(x, grec, mode="bilinear")
    return photometric_apply(x.numpy().transpose(1, 2, 0), prec)


def sample_pair(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[AugmentedView, AugmentedView]:
    """Two independently augmented views of one frame, records retained."""
    views = []
    hw = image.shape[:2]
    for _ in range(2):
        grec = sample_geometric(hw, cfg, rng)
        prec = sample_photometric(cfg, rng)
        views.append(AugmentedView(image=augment_image(image, grec, prec), geometric=grec, photometric=prec))
    return views[0], views[1]


def augment_sample(image: np.ndarray, flow: np.ndarray, depth: np.ndarray, mask: np.ndarray,
                   grec: GeometricRecord, prec: PhotometricRecord) -> dict[str, np.ndarray]:
    """Jointly transform a training sample; photometric touches the image only."""
    out_img = augment_image(image, grec, prec)
    flow_t = torch.from_numpy(np.ascontiguousarray(flow.transpose(2, 0, 1)))
    depth_t = torch.from_numpy(depth)[None]
    mask_t = torch.from_numpy(mask.astype(np.float32))[None]
    if not grec.is_identity:
        flow_t = geometric_apply(flow_t, grec, mode="bilinear", is_flow=True)
        depth_t = geometric_apply(depth_t, grec, mode="bilinear")
        mask_t = geometric_apply(mask_t, grec, mode="nearest")
    return {
        "image": out_img,
        "flow": flow_t.numpy().transpose(1, 2, 0),
        "depth": depth_t.numpy()[0],
        "mask": mask_t.numpy()[0].astype(np.uint8),
    }


# ---------------------------------------------------------------------------
# warping predictions back to the canonical grid


def _axis_maps(canonical_len: int, resized_len: int):
    q = torch.arange(canonical_len, dtype=torch.float64)
    # continuous resized coordinate of each canonical pixel center
    u = (q + 0.5) * resized_len / canonical_len - 0.5
    v = torch.floor((q + 0.5) * resized_len / canonical_len).long().clamp_(0, resized_len - 1)
    # forward nearest source of each resized pixel (for exactness check)
    src_of_v = torch.floor((v.double() + 0.5) * canonical_len / resized_len).long().clamp_(max=canonical_len - 1)
    return u, v, src_of_v


def _unclamped_span(canonical_len: int, resized_len: int) -> tuple[int, int]:
    """Inclusive index range of resized pixels whose forward sampling point
    lies inside [0, canonical_len - 1] (no edge clamping)."""
    import math

    lo = max(0, math.ceil(resized_len / (2.0 * canonical_len) - 0.5))
    hi = min(resized_len - 1, math.floor((canonical_len - 0.5) * resized_len / canonical_len - 0.5))
    return lo, hi


def validity_mask(rec: GeometricRecord, canonical_hw: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Canonical-grid pixels whose value is recoverable from the view.

    Bilinear validity requires the full interpolation footprint inside the
    crop; nearest validity additionally demands the round trip be exact,
    which excludes pixels destroyed by downsampling.
    """
    if canonical_hw != rec.input_hw:
        raise AugmentError(f"canonical size {canonical_hw} does not match record base {rec.input_hw}")
    (hc, wc), (hr, wr) = canonical_hw, rec.resized_hw
    (r0, c0), (h, w) = rec.crop_origin, rec.crop_size
    ur, vr, src_r = _axis_maps(hc, hr)
    uc, vc, src_c = _axis_maps(wc, wr)
    if mode == "nearest":
        row_ok = (vr >= r0) & (vr < r0 + h) & (src_r == torch.arange(hc))
        col_ok = (vc >= c0) & (vc < c0 + w) & (src_c == torch.arange(wc))
    else:
        # border view pixels synthesized by edge clamping in the forward
        # resize are not faithful samples; exclude them from the support
        lo_r, hi_r = _unclamped_span(hc, hr)
        lo_c, hi_c = _unclamped_span(wc, wr)
        row_ok = (ur >= max(r0, lo_r)) & (ur <= min(r0 + h - 1, hi_r))
        col_ok = (uc >= max(c0, lo_c)) & (uc <= min(c0 + w - 1, hi_c))
    valid = row_ok[:, None] & col_ok[None, :]
    if rec.hflip:
        valid = torch.flip(valid, dims=[-1])
    return valid


def warp_to_canonical(pred: torch.Tensor, rec: GeometricRecord, canonical_hw: tuple[int, int],
                      mode: str = "bilinear") -> tuple[torch.Tensor, torch.Tensor]:
    """Invert crop -> resize -> flip, mapping a view prediction onto the
    canonical grid.  Returns (map, validity);  values outside validity are 0.

    Differentiable in the prediction values (pure gather / weighted gather),
    so consistency losses can backpropagate through it.
    """
    rec.validate()
    squeeze = pred.dim() == 2
    x = pred.unsqueeze(0) if squeeze else pred
    if tuple(x.shape[-2:]) != rec.output_hw:
        raise AugmentError(f"prediction size {tuple(x.shape[-2:])} does not match record output {rec.output_hw}")
    (hc, wc) = canonical_hw
    if canonical_hw != rec.input_hw:
        raise AugmentError(f"canonical size {canonical_hw} does not match record base {rec.input_hw}")
    (hr, wr) = rec.resized_hw
    (r0, c0), (h, w) = rec.crop_origin, rec.crop_size
    ur, vr, _ = _axis_maps(hc, hr)
    uc, vc, _ = _axis_maps(wc, wr)

    if mode == "nearest":
        rows = (vr - r0).clamp(0, h - 1)
        cols = (vc - c0).clamp(0, w - 1)
        out = x.index_select(-2, rows).index_select(-1, cols)
    else:
        # crop-local continuous coords; validity guarantees in-range taps
        ul = (ur - r0).clamp(0.0, float(h - 1))
        vl = (uc - c0).clamp(0.0, float(w - 1))
        r_lo = ul.floor().long().clamp(0, h - 1)
        r_hi = (r_lo + 1).clamp(max=h - 1)
        c_lo = vl.floor().long().clamp(0, w - 1)
        c_hi = (c_lo + 1).clamp(max=w - 1)
        wr_hi = (ul - r_lo.double()).to(x.dtype)
        wc_hi = (vl - c_lo.double()).to(x.dtype)
        top = x.index_select(-2, r_lo)
        bot = x.index_select(-2, r_hi)
        def _mix_cols(t):
            lo = t.index_select(-1, c_lo)
            hi = t.index_select(-1, c_hi)
            return lo * (1 - wc_hi) + hi * wc_hi
        out = _mix_cols(top) * (1 - wr_hi[:, None]) + _mix_cols(bot) * wr_hi[:, None]

    valid = validity_mask(rec, canonical_hw, mode=mode)
    if rec.hflip:
        out = torch.flip(out, dims=[-1])
    out = out * valid.to(out.dtype)
    if squeeze:
        out = out.squeeze(0)
    return out, valid


def joint_validity(rec1: GeometricRecord, rec2: GeometricRecord,
                   canonical_hw: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Intersection of both views' validity; the consistency-loss support."""
    return validity_mask(rec1, canonical_hw, mode) & validity_mask(rec2, canonical_hw, mode)
