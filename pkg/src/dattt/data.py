"""Synthetic moving-shape videos with exact masks, depth, and flow, plus
DAVIS-style on-disk ingestion.

Every frame is rendered by compositing hard-edged layers nearest-depth-first,
so depth, flow, mask, and appearance are mutually consistent by construction:
the pixel's depth is the minimum layer depth, its flow is the visible layer's
velocity, and the mask marks the visible region of the primary object.
Appearance encodes depth through fog attenuation (farther layers fade toward
the haze color), which is what makes single-image depth prediction learnable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DataConfig, PhotometricRegime, PhotometricShift

HAZE_COLOR = np.array([0.72, 0.72, 0.78], dtype=np.float32)
SHAPES = ("disc", "rectangle", "triangle")


class DatasetError(ValueError):
    """Invalid scene spec or malformed on-disk dataset."""


@dataclass
class VideoSample:
    """One frame: RGB image in [0,1], flow (row, col) in px/frame, positive
    relative depth, binary mask, and the frame index."""

    image: np.ndarray   # H x W x 3 float32
    flow: np.ndarray    # H x W x 2 float32, channel 0 = row, 1 = col
    depth: np.ndarray   # H x W float32, strictly positive
    mask: np.ndarray    # H x W uint8 in {0, 1}
    frame_index: int

    def validate(self) -> "VideoSample":
        hw = self.image.shape[:2]
        if self.flow.shape[:2] != hw or self.depth.shape != hw or self.mask.shape != hw:
            raise DatasetError(f"frame {self.frame_index}: spatial dimensions disagree")
        if not np.all(self.depth > 0):
            raise DatasetError(f"frame {self.frame_index}: depth must be strictly positive")
        if not np.isin(self.mask, (0, 1)).all():
            raise DatasetError(f"frame {self.frame_index}: mask values must be 0/1")
        return self


@dataclass
class VideoSequence:
    video_id: str
    samples: list[VideoSample]
    annotated_indices: set[int] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.samples)

    def validate(self) -> "VideoSequence":
        if not self.samples:
            raise DatasetError(f"video {self.video_id}: empty sequence")
        for t, s in enumerate(self.samples):
            if s.frame_index != t:
                raise DatasetError(f"video {self.video_id}: frame indices must be 0..T-1 contiguous")
            s.validate()
        hw = self.samples[0].image.shape[:2]
        for s in self.samples:
            if s.image.shape[:2] != hw:
                raise DatasetError(f"video {self.video_id}: frames of differing sizes")
        return self


@dataclass
class ObjectSpec:
    shape: str                       # disc | rectangle | triangle
    size: float | tuple[float, float]  # radius / half-extents
    position: tuple[float, float]    # initial center (row, col)
    velocity: tuple[float, float]    # px/frame (row, col)
    depth: float
    is_primary: bool = False
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass
class SceneSpec:
    height: int
    width: int
    num_frames: int
    background_depth: float
    objects: list[ObjectSpec]
    regime: PhotometricRegime
    seed: int
    background_color: tuple[float, float, float] = (0.35, 0.42, 0.35)
    video_id: str = "video"

    def validate(self) -> "SceneSpec":
        if self.num_frames < 1:
            raise DatasetError("num_frames: a scene needs at least one frame")
        if self.height < 1 or self.width < 1:
            raise DatasetError("canvas: height and width must be positive")
        if self.background_depth <= 0:
            raise DatasetError("background_depth must be positive")
        primaries = [i for i, o in enumerate(self.objects) if o.is_primary]
        if len(primaries) != 1:
            raise DatasetError(f"objects: exactly one primary required, found {len(primaries)}")
        for i, obj in enumerate(self.objects):
            if obj.shape not in SHAPES:
                raise DatasetError(f"objects[{i}].shape: unknown shape {obj.shape!r}")
            if obj.depth <= 0:
                raise DatasetError(f"objects[{i}].depth must be positive")
            hh, hw = _half_extents(obj)
            if 2 * hh > self.height or 2 * hw > self.width:
                raise DatasetError(f"objects[{i}].size: object larger than canvas")
        prim = self.objects[primaries[0]]
        others = [o.depth for o in self.objects if not o.is_primary] + [self.background_depth]
        if not all(prim.depth < d for d in others):
            raise DatasetError("objects: the primary must have strictly the smallest depth")
        if prim.velocity == (0.0, 0.0):
            raise DatasetError("objects: the primary must have nonzero velocity")
        return self


def _half_extents(obj: ObjectSpec) -> tuple[float, float]:
    if isinstance(obj.size, tuple):
        return float(obj.size[0]), float(obj.size[1])
    return float(obj.size), float(obj.size)


def _object_occupancy(obj: ObjectSpec, center: tuple[float, float], h: int, w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dr, dc = rr - center[0], cc - center[1]
    hh, hw = _half_extents(obj)
    if obj.shape == "disc":
        return dr * dr + dc * dc <= hh * hh
    if obj.shape == "rectangle":
        return (np.abs(dr) <= hh) & (np.abs(dc) <= hw)
    # upward triangle: apex (-hh, 0), base corners (hh, -hw) and (hh, hw)
    inside = dr <= hh
    inside &= dc * (2 * hh) <= (dr + hh) * hw
    inside &= -dc * (2 * hh) <= (dr + hh) * hw
    return inside


def _attenuate(color: np.ndarray, depth: float, background_depth: float) -> np.ndarray:
    # linear fog toward the haze color; nearer objects keep more of their color
    t = np.clip(depth / (background_depth * 1.25), 0.0, 1.0).astype(np.float32)
    return (1.0 - t) * color.astype(np.float32) + t * HAZE_COLOR


def render_clean_frame(spec: SceneSpec, t: int) -> VideoSample:
    """Noise/photometric-free render of frame t (layered nearest-depth-first)."""
    h, w = spec.height, spec.width
    depth = np.full((h, w), spec.background_depth, dtype=np.float32)
    flow = np.zeros((h, w, 2), dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.uint8)
    image = np.broadcast_to(
        _attenuate(np.asarray(spec.background_color), spec.background_depth, spec.background_depth),
        (h, w, 3),
    ).astype(np.float32).copy()

    # paint back-to-front so the nearest layer wins at every pixel
    for obj in sorted(spec.objects, key=lambda o: -o.depth):
        center = (obj.position[0] + t * obj.velocity[0], obj.position[1] + t * obj.velocity[1])
        occ = _object_occupancy(obj, center, h, w)
        visible = occ & (obj.depth < depth)
        depth[visible] = obj.depth
        flow[visible, 0] = obj.velocity[0]
        flow[visible, 1] = obj.velocity[1]
        image[visible] = _attenuate(np.asarray(obj.color), obj.depth, spec.background_depth)
        if obj.is_primary:
            mask[:] = 0
            mask[visible] = 1
    return VideoSample(image=image, flow=flow, depth=depth, mask=mask, frame_index=t)


def render_video(spec: SceneSpec, apply_photometric: bool = True) -> VideoSequence:
    """Render a full video; pure function of the spec (bit-identical replays).

    The rng stream draws the per-video photometric parameters first and the
    per-frame noise fields last, so a zero-noise replay of the same spec
    shares the brightness/contrast draws with the noisy one.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    brightness = rng.uniform(spec.regime.brightness_lo, spec.regime.brightness_hi)
    contrast = rng.uniform(spec.regime.contrast_lo, spec.regime.contrast_hi)
    samples = []
    for t in range(spec.num_frames):
        sample = render_clean_frame(spec, t)
        noise_field = rng.standard_normal(size=(spec.height, spec.width, 3)).astype(np.float32)
        if apply_photometric:
            img = (sample.image - 0.5) * contrast + 0.5 + brightness
            img = img + spec.regime.noise_std * noise_field
            sample.image = np.clip(img, 0.0, 1.0).astype(np.float32)
        samples.append(sample)
    return VideoSequence(
        video_id=spec.video_id, samples=samples, annotated_indices=set(range(spec.num_frames))
    ).validate()


def generate_dataset(specs: list[SceneSpec]) -> list[VideoSequence]:
    return [render_video(spec) for spec in specs]


# ---------------------------------------------------------------------------
# scene sampling and domain splitting


def shift_regime(regime: PhotometricRegime, shift: PhotometricShift) -> PhotometricRegime:
    return PhotometricRegime(
        brightness_lo=regime.brightness_lo + shift.brightness,
        brightness_hi=regime.brightness_hi + shift.brightness,
        contrast_lo=regime.contrast_lo + shift.contrast,
        contrast_hi=regime.contrast_hi + shift.contrast,
        noise_std=regime.noise_std + shift.noise_std,
    )


def shift_spec(spec: SceneSpec, shift: PhotometricShift) -> SceneSpec:
    out = SceneSpec(
        height=spec.height,
        width=spec.width,
        num_frames=spec.num_frames,
        background_depth=spec.background_depth,
        objects=list(spec.objects),
        regime=shift_regime(spec.regime, shift),
        seed=spec.seed,
        background_color=spec.background_color,
        video_id=spec.video_id,
    )
    return out


def split_domains(
    base_specs: list[SceneSpec], shift: PhotometricShift
) -> tuple[list[SceneSpec], list[SceneSpec]]:
    """Train specs are the base; test specs share geometry with the
    photometric regime shifted. shift = 0 returns equal splits."""
    train = [shift_spec(s, PhotometricShift()) for s in base_specs]
    test = [shift_spec(s, shift) for s in base_specs]
    return train, test


_PALETTE = [
    (0.85, 0.25, 0.20),
    (0.20, 0.40, 0.80),
    (0.90, 0.75, 0.20),
    (0.55, 0.20, 0.65),
    (0.20, 0.70, 0.60),
    (0.80, 0.45, 0.15),
]


def sample_scene_specs(
    count: int,
    num_frames: int,
    cfg: DataConfig,
    regime: PhotometricRegime,
    seed: int,
    id_prefix: str = "video",
) -> list[SceneSpec]:
    """Draw random scenes: one near fast primary plus farther distractors."""
    rng = np.random.default_rng(seed)
    specs = []
    for k in range(count):
        n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        depth_span = cfg.object_depth_hi - cfg.object_depth_lo
        primary_depth = cfg.object_depth_lo + 0.25 * depth_span * rng.random()
        objects = []
        for i in range(n_objects):
            is_primary = i == 0
            if is_primary:
                depth = primary_depth
            else:
                depth = primary_depth + 0.8 + rng.random() * (cfg.object_depth_hi - primary_depth - 0.8)
            # nearer objects are drawn a touch larger (weak size-depth prior)
            base = min(cfg.height, cfg.width)
            size = base * (0.10 + 0.10 * rng.random()) * (1.15 - 0.05 * depth / cfg.object_depth_hi)
            margin = size + 2
            pos = (
                float(rng.uniform(margin, cfg.height - margin)),
                float(rng.uniform(margin, cfg.width - margin)),
            )
            if is_primary:
                speed = rng.uniform(0.6, 1.6)
                angle = rng.uniform(0, 2 * np.pi)
                vel = (float(speed * np.sin(angle)), float(speed * np.cos(angle)))
                if vel == (0.0, 0.0):
                    vel = (0.0, 1.0)
            else:
                vel = (0.0, 0.0) if rng.random() < 0.5 else (
                    float(rng.uniform(-0.4, 0.4)),
                    float(rng.uniform(-0.4, 0.4)),
                )
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            if shape == "rectangle":
                size_spec: float | tuple[float, float] = (size * rng.uniform(0.6, 1.0), size * rng.uniform(0.6, 1.0))
            else:
                size_spec = size * 0.8
            color = _PALETTE[int(rng.integers(len(_PALETTE)))]
            objects.append(
                ObjectSpec(
                    shape=shape, size=size_spec, position=pos, velocity=vel,
                    depth=float(depth), is_primary=is_primary, color=color,
                )
            )
        specs.append(
            SceneSpec(
                height=cfg.height, width=cfg.width, num_frames=num_frames,
                background_depth=cfg.background_depth, objects=objects,
                regime=regime, seed=int(rng.integers(2**31 - 1)),
                video_id=f"{id_prefix}_{k:03d}",
            ).validate()
        )
    return specs


def default_splits(cfg: DataConfig) -> tuple[list[VideoSequence], list[VideoSequence]]:
    """The desk-scale train/test datasets: same scene distribution, test
    videos rendered under the shifted photometric regime."""
    train_specs = sample_scene_specs(
        cfg.train_videos, cfg.train_frames, cfg, cfg.regime, seed=cfg.seed, id_prefix="train"
    )
    test_base = sample_scene_specs(
        cfg.test_videos, cfg.test_frames, cfg, cfg.regime, seed=cfg.seed + 7919, id_prefix="test"
    )
    _, test_specs = split_domains(test_base, cfg.shift)
    return generate_dataset(train_specs), generate_dataset(test_specs)


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<video>/frames|masks|depth|flow + manifest.json


def save_dataset(sequences: list[VideoSequence], root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"videos": []}
    for seq in sequences:
        vdir = root / seq.video_id
        for sub in ("frames", "masks", "depth", "flow"):
            (vdir / sub).mkdir(parents=True, exist_ok=True)
        for s in seq.samples:
            name = f"{s.frame_index:05d}"
            Image.fromarray((s.image * 255.0 + 0.5).astype(np.uint8)).save(vdir / "frames" / f"{name}.png")
            if s.frame_index in seq.annotated_indices:
                Image.fromarray((s.mask * 255).astype(np.uint8)).save(vdir / "masks" / f"{name}.png")
            np.save(vdir / "depth" / f"{name}.npy", s.depth.astype(np.float32))
            np.save(vdir / "flow" / f"{name}.npy", s.flow.astype(np.float32))
        manifest["videos"].append(
            {
                "id": seq.video_id,
                "num_frames": len(seq),
                "annotated_indices": sorted(seq.annotated_indices),
            }
        )
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(root: str | Path, synthetic_fallback: bool = False,
                 background_depth: float = 10.0) -> list[VideoSequence]:
    """Read a dataset root. Missing masks become unannotated indices; missing
    depth/flow raise unless synthetic_fallback, which substitutes a constant
    background depth and zero flow."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        entries = json.loads(manifest_path.read_text())["videos"]
        video_ids = [e["id"] for e in entries]
    else:
        video_ids = sorted(p.name for p in root.iterdir() if (p / "frames").is_dir())
    if not video_ids:
        raise DatasetError(f"no videos found under {root}")

    sequences = []
    for vid in video_ids:
        vdir = root / vid
        frame_files = sorted((vdir / "frames").glob("*.png"))
        if not frame_files:
            raise DatasetError(f"video {vid}: no frames")
        samples = []
        annotated: set[int] = set()
        hw = None
        for t, fpath in enumerate(frame_files):
            image = np.asarray(Image.open(fpath).convert("RGB"), dtype=np.float32) / 255.0
            if hw is None:
                hw = image.shape[:2]
            elif image.shape[:2] != hw:
                raise DatasetError(f"video {vid}: frame {fpath.name} has mismatched dimensions")
            name = fpath.stem
            mask_path = vdir / "masks" / f"{name}.png"
            if mask_path.exists():
                mask = (np.asarray(Image.open(mask_path).convert("L")) > 127).astype(np.uint8)
                if mask.shape != hw:
                    raise DatasetError(f"video {vid}: mask {name} has mismatched dimensions")
                annotated.add(t)
            else:
                mask = np.zeros(hw, dtype=np.uint8)
            depth_path = vdir / "depth" / f"{name}.npy"
            if depth_path.exists():
                depth = np.load(depth_path).astype(np.float32)
                if depth.shape != hw:
                    raise DatasetError(f"video {vid}: depth {name} has mismatched dimensions")
                bad = int((depth <= 0).sum())
                if bad:
                    raise DatasetError(
                        f"video {vid}: depth file {depth_path.name} has {bad} nonpositive pixels"
                    )
            elif synthetic_fallback:
                depth = np.full(hw, background_depth, dtype=np.float32)
            else:
                raise DatasetError(f"video {vid}: missing depth for frame {name}")
            flow_path = vdir / "flow" / f"{name}.npy"
            if flow_path.exists():
                flow = np.load(flow_path).astype(np.float32)
                if flow.shape[:2] != hw or flow.shape[2:] != (2,):
                    raise DatasetError(f"video {vid}: flow {name} has mismatched dimensions")
            elif synthetic_fallback:
                flow = np.zeros((*hw, 2), dtype=np.float32)
            else:
                raise DatasetError(f"video {vid}: missing flow for frame {name}")
            samples.append(VideoSample(image=image, flow=flow, depth=depth, mask=mask, frame_index=t))
        sequences.append(VideoSequence(video_id=vid, samples=samples, annotated_indices=annotated).validate())
    return sequences
