"""Missing-modality tolerant multi-channel segmentation, end to end.

Channel-separate encoder U-Net with bias-free fusion, modality-drop
training with an adversarial bottleneck similarity loss, Dice evaluation
over composite regions, and per-channel weight-of-evidence relevance maps,
exercised on a seeded synthetic multi-channel dataset.
"""

from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .dataio import (
    CHANNEL_NAMES,
    ChannelMask,
    Dataset,
    MultiModalSample,
    SyntheticSpec,
    generate_synthetic_dataset,
    normalize_channels,
    read_sample,
    write_sample,
)
from .evaluation import DiceReport, dice, evaluate_matrix, render_report
from .losses import Discriminator, LossConfig, seg_loss, similarity_losses, total_loss
from .model import ChannelSeparateUNet, ModelConfig, StagedPrediction, init_model
from .relevance import OddsConfig, export_heatmap, relevance_report, weight_of_evidence
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CHANNEL_NAMES",
    "ChannelMask",
    "ChannelSeparateUNet",
    "Dataset",
    "DiceReport",
    "Discriminator",
    "LossConfig",
    "ModelConfig",
    "MultiModalSample",
    "OddsConfig",
    "StagedPrediction",
    "SyntheticSpec",
    "TrainConfig",
    "dice",
    "evaluate_matrix",
    "export_heatmap",
    "generate_synthetic_dataset",
    "init_model",
    "load_checkpoint",
    "load_model",
    "normalize_channels",
    "read_sample",
    "relevance_report",
    "render_report",
    "save_checkpoint",
    "save_model",
    "seg_loss",
    "similarity_losses",
    "total_loss",
    "train",
    "weight_of_evidence",
    "write_sample",
]
