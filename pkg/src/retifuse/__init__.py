"""Multimodal diabetic-retinopathy staging: image/tabular fusion, a
contrastive deferral scorer, and the training and evaluation around them."""

__version__ = "0.1.0"

from .dataprep import FEATURE_NAMES, SELECTED_FEATURES, Dataset, class_weights, synth_generate
from .deferral import ContrastiveNet, DeferralConfig, contrastive_loss, train_deferral
from .fusion import FusionModel, fuse_concat, fuse_cross_attention, fuse_fc
from .metrics import MetricsReport, auroc_ovr, confusion_matrix
from .training import TrainConfig, train_fusion_cv, train_tabular
from .tsne import TsneConfig, tsne_embed

__all__ = [
    "FEATURE_NAMES",
    "SELECTED_FEATURES",
    "ContrastiveNet",
    "Dataset",
    "DeferralConfig",
    "FusionModel",
    "MetricsReport",
    "TrainConfig",
    "TsneConfig",
    "auroc_ovr",
    "class_weights",
    "confusion_matrix",
    "contrastive_loss",
    "fuse_concat",
    "fuse_cross_attention",
    "fuse_fc",
    "synth_generate",
    "train_deferral",
    "train_fusion_cv",
    "train_tabular",
    "tsne_embed",
]
