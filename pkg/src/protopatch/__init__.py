"""Patch-prototype time-series classification with built-in explanations."""

from .autodiff import Tape, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    ChannelStats,
    Dataset,
    SyntheticAnomalyConfig,
    channel_stats,
    generate_anomaly,
    load_multichannel_csv,
    load_ucr_tsv,
    pad_to_multiple,
    split,
    znormalize,
)
from .explain import (
    Explanation,
    SanityReport,
    closeness,
    decode_prototype,
    explain_sample,
    representative_patch,
    sanity_replacement,
    substitute_and_reclassify,
)
from .losses import LossBreakdown, LossWeights, patch_loss
from .model import (
    ConvBaseline,
    ModelConfig,
    PatchGrid,
    PatchPrototypeNet,
    PrototypeBank,
    PrototypeWeights,
    receptive_window,
    similarity_grid,
)
from .training import (
    Adam,
    TrainConfig,
    TrainReport,
    train_baseline,
    train_stage1,
    train_stage2,
    train_two_stage,
)

__all__ = [
    "Adam", "ChannelStats", "ConvBaseline", "Dataset", "Explanation",
    "LossBreakdown", "LossWeights", "ModelConfig", "PatchGrid",
    "PatchPrototypeNet", "PrototypeBank", "PrototypeWeights", "SanityReport",
    "SyntheticAnomalyConfig", "Tape", "Tensor", "TrainConfig", "TrainReport",
    "backward", "channel_stats", "closeness", "decode_prototype",
    "explain_sample", "generate_anomaly", "load_checkpoint",
    "load_multichannel_csv", "load_ucr_tsv", "pad_to_multiple", "patch_loss",
    "receptive_window", "representative_patch", "sanity_replacement",
    "save_checkpoint", "similarity_grid", "split", "substitute_and_reclassify",
    "train_baseline", "train_stage1", "train_stage2", "train_two_stage",
    "znormalize",
]
