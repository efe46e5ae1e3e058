"""Depth-aware test-time training for zero-shot video object segmentation,
at desk scale: synthetic data, a miniature two-stream network, consistency
driven per-video adaptation with three weight-update schedules, baseline
adapters, and full evaluation."""

__version__ = "0.1.0"

from .config import (
    AugmentConfig,
    DataConfig,
    ExperimentConfig,
    LossConfig,
    ModelConfig,
    PhotometricRegime,
    PhotometricShift,
    TrainConfig,
    TTTConfig,
    load_config,
)
from .data import (
    ObjectSpec,
    SceneSpec,
    VideoSample,
    VideoSequence,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_domains,
)
from .augment import (
    AugmentedView,
    GeometricRecord,
    PhotometricRecord,
    joint_validity,
    sample_pair,
    warp_to_canonical,
)
from .model import (
    COMPONENTS,
    ForwardOutput,
    SegDepthNet,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .losses import (
    SKIP,
    bce_loss,
    consistency_loss,
    joint_loss,
    pseudo_depth_loss,
    silog_loss,
)
from .train import finetune, train_stage1
from .ttt import (
    AdaptationOutcome,
    AdaptationTrace,
    TTTSchedule,
    adapt_video,
    bn_stats_adapt,
    build_schedule,
    infer_video,
    tent_adapt,
)
from .metrics import MetricsReport, evaluate, f_measure, jaccard
from .harness import directional_study, run_ablation, run_pipeline
