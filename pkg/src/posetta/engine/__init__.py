"""Losses, augmentations and the streaming adaptation pipelines."""
from .augment import AugmentSpec, Transform, sample_transform
from .losses import (
    FrameBatch,
    LossWeights,
    consistency_loss,
    loss_2d,
    loss_adapt,
    loss_aug,
    loss_proj,
    prior_penalty,
)
from .pipeline import (
    EngineConfig,
    PipelineMode,
    RunReport,
    StreamRunner,
    TwoStageConfig,
    adaptive_aggregation,
    local_augmentation,
    run_stream,
    stage1_adapt,
    stage2_adapt,
)
