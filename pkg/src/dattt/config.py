"""Dataclass configs for every stage plus the dotted key-value config file format.

A config file is plain text, one ``section.key = value`` per line, ``#``
comments allowed.  Values are parsed with :func:`ast.literal_eval` and fall
back to bare strings, so ``0.1``, ``true``, ``(0.8, 1.25)`` and ``ttt_ltv``
all round-trip.  CLI ``--set key=value`` overrides use the same parser.
"""

from __future__ import annotations

import ast
import dataclasses
import os
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

SEED_ENV_VAR = "DATTT_SEED"


class ConfigError(ValueError):
    """Invalid config contents (bad key, bad value, inverted range)."""


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugToggle:
    enabled: bool = True


@dataclass
class HFlipConfig(AugToggle):
    prob: float = 0.5


@dataclass
class ResizeConfig(AugToggle):
    scale_min: float = 0.8
    scale_max: float = 1.25


@dataclass
class CropConfig(AugToggle):
    # target crop area as a fraction of the resized image; the realized side
    # is snapped down to a multiple of `snap` so views batch into few sizes
    area_fraction: float = 0.875
    snap: int = 8


@dataclass
class BrightnessConfig(AugToggle):
    max_delta: float = 0.125


@dataclass
class ContrastConfig(AugToggle):
    lo: float = 0.75
    hi: float = 1.25


@dataclass
class SaturationConfig(AugToggle):
    lo: float = 0.75
    hi: float = 1.25


@dataclass
class HueConfig(AugToggle):
    max_shift: float = 0.05  # turns, in (-0.5, 0.5]


@dataclass
class AugmentConfig:
    hflip: HFlipConfig = field(default_factory=HFlipConfig)
    resize: ResizeConfig = field(default_factory=ResizeConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    brightness: BrightnessConfig = field(default_factory=BrightnessConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    saturation: SaturationConfig = field(default_factory=SaturationConfig)
    hue: HueConfig = field(default_factory=HueConfig)

    def validate(self) -> None:
        if not 0.0 <= self.hflip.prob <= 1.0:
            raise ConfigError("aug.hflip.prob must lie in [0, 1]")
        if self.resize.scale_min <= 0 or self.resize.scale_max < self.resize.scale_min:
            raise ConfigError("aug.resize scale range is empty or inverted")
        if not 0.0 < self.crop.area_fraction <= 1.0:
            raise ConfigError("aug.crop.area_fraction must lie in (0, 1]")
        if self.brightness.max_delta < 0:
            raise ConfigError("aug.brightness.max_delta must be nonnegative")
        for name, rng in (("contrast", self.contrast), ("saturation", self.saturation)):
            if rng.lo <= 0 or rng.hi < rng.lo:
                raise ConfigError(f"aug.{name} range is empty, inverted, or nonpositive")
        if not 0.0 <= self.hue.max_shift <= 0.5:
            raise ConfigError("aug.hue.max_shift must lie in [0, 0.5]")

    def disabled(self) -> "AugmentConfig":
        """Copy with every augmentation type switched off (identity pipeline)."""
        cfg = replace_deep(self)
        for f in fields(cfg):
            getattr(cfg, f.name).enabled = False
        return cfg

    def without(self, kind: str) -> "AugmentConfig":
        """Copy with one augmentation type disabled (leave-one-out ablation)."""
        if kind not in {f.name for f in fields(self)}:
            raise ConfigError(f"unknown augmentation kind {kind!r}")
        cfg = replace_deep(self)
        getattr(cfg, kind).enabled = False
        return cfg


# ---------------------------------------------------------------------------
# model / loss


@dataclass
class ModelConfig:
    base_width: int = 16          # pyramid widths (C, 2C, 4C, 8C)
    decoder_width: int = 32       # common width after per-scale projection
    image_channels: int = 3
    flow_channels: int = 2
    depth_eps: float = 1e-3       # softplus(depth_raw) + depth_eps > 0
    norm_momentum: float = 0.1
    use_modulation: bool = True


@dataclass
class LossConfig:
    lambda_: float = 0.1          # depth term weight; file key `loss.lambda`
    silog_alpha: float = 10.0
    silog_lambda_v: float = 0.85
    silog_variant: str = "zoe"    # "zoe" (sqrt form) or "eigen" (non-root, 0.5)
    eps_log: float = 1e-6
    stop_gradient_reference: bool = False  # detach view-1 depth in consistency

    def validate(self) -> None:
        if self.lambda_ < 0:
            raise ConfigError("loss.lambda must be nonnegative")
        if self.silog_alpha <= 0:
            raise ConfigError("loss.silog.alpha must be positive")
        if not 0.0 <= self.silog_lambda_v <= 1.0:
            raise ConfigError("loss.silog.lambda_v must lie in [0, 1]")
        if self.silog_variant not in ("zoe", "eigen"):
            raise ConfigError("loss.silog.variant must be 'zoe' or 'eigen'")


# ---------------------------------------------------------------------------
# data


@dataclass
class PhotometricRegime:
    brightness_lo: float = -0.05
    brightness_hi: float = 0.05
    contrast_lo: float = 0.95
    contrast_hi: float = 1.05
    noise_std: float = 0.02


@dataclass
class PhotometricShift:
    brightness: float = 0.0
    contrast: float = 0.0
    noise_std: float = 0.0

    def is_identity(self) -> bool:
        return self.brightness == 0.0 and self.contrast == 0.0 and self.noise_std == 0.0


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    train_videos: int = 24
    train_frames: int = 24
    test_videos: int = 6
    test_frames: int = 40
    background_depth: float = 10.0
    object_depth_lo: float = 1.0
    object_depth_hi: float = 8.0
    min_objects: int = 2
    max_objects: int = 4
    regime: PhotometricRegime = field(default_factory=PhotometricRegime)
    # applied to the test split only; tuned so the train/test gap is real
    shift: PhotometricShift = field(
        default_factory=lambda: PhotometricShift(brightness=0.22, contrast=-0.12, noise_std=0.06)
    )
    seed: int = 0


# ---------------------------------------------------------------------------
# train / ttt


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    max_steps: int | None = None  # optional hard cap across epochs
    augment: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigError("train epochs/batch/lr must be positive")


STRATEGIES = ("none", "ttt_n", "ttt_mwi", "ttt_ltv")
OBJECTIVES = ("consistency", "pseudo_depth")


@dataclass
class TTTConfig:
    strategy: str = "ttt_ltv"
    objective: str = "consistency"
    epochs: int = 10
    learning_rate: float = 1e-5
    batch_pairs: int = 8
    clip_sampling: int | None = None  # None = off; Appendix-style default is 10
    trainable: tuple[str, ...] = ("image_encoder",)
    grad_clip: float = 5.0
    online_inference: bool = False   # MWI per-frame snapshot mode
    track_epoch_metrics: bool = False
    keep_snapshots: bool = True
    seed: int = 0

    def validate(self) -> None:
        from .model import COMPONENTS  # local import to avoid a cycle

        if self.strategy not in STRATEGIES:
            raise ConfigError(f"ttt.strategy must be one of {STRATEGIES}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"ttt.objective must be one of {OBJECTIVES}")
        if self.strategy != "none" and self.epochs < 1:
            raise ConfigError("ttt.epochs must be >= 1 when a strategy is active")
        if self.batch_pairs <= 0:
            raise ConfigError("ttt.batch_pairs must be positive")
        if self.clip_sampling is not None and self.clip_sampling < 1:
            raise ConfigError("ttt.clip_sampling must be >= 1 or unset")
        unknown = set(self.trainable) - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"ttt.trainable contains unknown components {sorted(unknown)}")


# ---------------------------------------------------------------------------
# experiment aggregate


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ttt: TTTConfig = field(default_factory=TTTConfig)

    def validate(self) -> "ExperimentConfig":
        self.aug.validate()
        self.loss.validate()
        self.train.validate()
        self.ttt.validate()
        return self

    def reseed(self, seed: int) -> "ExperimentConfig":
        """Propagate a master seed to every stage (stable per-stage offsets)."""
        cfg = replace_deep(self)
        cfg.seed = seed
        cfg.data.seed = seed * 1000 + 1
        cfg.train.seed = seed * 1000 + 2
        cfg.ttt.seed = seed * 1000 + 3
        return cfg


def replace_deep(cfg):
    """Deep copy of a (possibly nested) dataclass."""
    if is_dataclass(cfg) and not isinstance(cfg, type):
        return type(cfg)(**{f.name: replace_deep(getattr(cfg, f.name)) for f in fields(cfg)})
    if isinstance(cfg, (list, tuple)):
        return type(cfg)(replace_deep(v) for v in cfg)
    return cfg


# ---------------------------------------------------------------------------
# flat dotted-key serialization

# file keys that do not match the attribute name 1:1
_KEY_ALIASES = {
    "loss.lambda": "loss.lambda_",
    "loss.silog.alpha": "loss.silog_alpha",
    "loss.silog.lambda_v": "loss.silog_lambda_v",
    "loss.silog.variant": "loss.silog_variant",
}
_ATTR_TO_KEY = {v: k for k, v in _KEY_ALIASES.items()}


def to_flat_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}

    def walk(prefix: str, obj: Any) -> None:
        if is_dataclass(obj) and not isinstance(obj, type):
            for f in fields(obj):
                walk(f"{prefix}.{f.name}" if prefix else f.name, getattr(obj, f.name))
        else:
            key = _ATTR_TO_KEY.get(prefix, prefix)
            out[key] = obj

    walk("", cfg)
    return out


def _resolve(cfg: ExperimentConfig, key: str):
    attr_path = _KEY_ALIASES.get(key, key)
    parts = attr_path.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config section in key {key!r}")
        obj = getattr(obj, part)
    if not hasattr(obj, parts[-1]):
        raise ConfigError(f"unknown config key {key!r}")
    return obj, parts[-1]


def _coerce(current: Any, value: Any, key: str) -> Any:
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"key {key!r} expects a boolean, got {value!r}")
    if isinstance(current, int) and isinstance(value, int):
        return value
    if isinstance(current, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(current, int) and value is None:
        return None
    raise ConfigError(f"key {key!r} expects {type(current).__name__}, got {value!r}")


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    cfg = replace_deep(cfg)
    for key, value in overrides.items():
        obj, attr = _resolve(cfg, key)
        setattr(obj, attr, _coerce(getattr(obj, attr), value, key))
    return cfg


def parse_value(text: str) -> Any:
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = parse_value(value)
    return values


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in to_flat_dict(cfg).items():
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        inner = ", ".join(_format_value(v) for v in value)
        return f"({inner},)" if len(value) == 1 else f"({inner})"
    if isinstance(value, str):
        return value
    return repr(value)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from defaults, an optional file, and overrides.

    The ``DATTT_SEED`` environment variable, when set, replaces the master
    seed last and re-derives the per-stage seeds.
    """
    cfg = ExperimentConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg = cfg.reseed(int(env_seed))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
    return cfg.validate()


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg))


def config_as_jsonable(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
