"""Training: configuration, multi-crop augmentation, the joint-objective loop."""

from mint.trainer.config import CONFIG_SCHEMA_VERSION, MODES, CropConfig, HeadConfig, TrainConfig, parse_override
from mint.trainer.loop import (
    SlideGeneSets,
    TrainState,
    build_batch,
    checkpoint_meta,
    ema_momentum_at,
    ema_update,
    init_train,
    load_checkpoint,
    lr_at,
    params_digest,
    save_checkpoint,
    step_rng,
    train,
    train_step,
)

__all__ = [
    "CONFIG_SCHEMA_VERSION",
    "MODES",
    "CropConfig",
    "HeadConfig",
    "TrainConfig",
    "SlideGeneSets",
    "TrainState",
    "build_batch",
    "checkpoint_meta",
    "ema_momentum_at",
    "ema_update",
    "init_train",
    "load_checkpoint",
    "lr_at",
    "params_digest",
    "parse_override",
    "save_checkpoint",
    "step_rng",
    "train",
    "train_step",
]
