"""CTC objective, optimizer schedule and the two-stage finetuning loop."""

from dysadapt.trainer.ctc import ctc_loss, greedy_decode, min_frames
from dysadapt.trainer.finetune import AuxFeatures, evaluate, format_log_line, make_train_config, train, write_log
from dysadapt.trainer.optim import AdamW, TrainConfig, clip_by_global_norm, learning_rate

__all__ = [
    "AdamW",
    "AuxFeatures",
    "TrainConfig",
    "clip_by_global_norm",
    "ctc_loss",
    "evaluate",
    "format_log_line",
    "greedy_decode",
    "learning_rate",
    "make_train_config",
    "min_frames",
    "train",
    "write_log",
]
