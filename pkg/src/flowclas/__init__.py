"""Normalizing-flow density estimation over frozen feature maps, trained
with masked inlier likelihood maximization plus latent-space contrastive
learning against pasted pseudo-outliers, producing per-pixel
nats-per-dimension anomaly maps with AUPRC / FPR95 evaluation."""

__version__ = "0.1.0"

from .flow import ActNorm, AffineCoupling, ChannelPermutation, FlowError, FlowStack
from .latent import DiagonalGaussianLatent
from .losses import (
    DegenerateBatchError,
    LossBreakdown,
    contrastive_pairs_loss,
    masked_nll,
    outlier_likelihood_min,
    supervised_contrastive,
    total_loss,
)
from .metrics import EvalResult, auprc, evaluate_run, evaluate_scores, fpr_at_tpr, score_histograms
from .projection import AnchorSets, ProjectionHead, sample_anchor_sets
from .scoring import ScoreMap, bilinear_upsample, export_heatmap, npd_map, score_images
from .synth import MixedSample, build_mixed_dataset, downsample_mask, paste_object
from .tensor import NonFiniteError, Parameter, Tape, TapeError, Tensor, TensorError
from .trainer import AdamW, FlowClasModel, TrainConfig, TrainResult, load_model, lr_at, train

__all__ = [
    "__version__",
    "ActNorm",
    "AffineCoupling",
    "AdamW",
    "AnchorSets",
    "ChannelPermutation",
    "DegenerateBatchError",
    "DiagonalGaussianLatent",
    "EvalResult",
    "FlowClasModel",
    "FlowError",
    "FlowStack",
    "LossBreakdown",
    "MixedSample",
    "NonFiniteError",
    "Parameter",
    "ProjectionHead",
    "ScoreMap",
    "Tape",
    "TapeError",
    "Tensor",
    "TensorError",
    "TrainConfig",
    "TrainResult",
    "auprc",
    "bilinear_upsample",
    "build_mixed_dataset",
    "contrastive_pairs_loss",
    "downsample_mask",
    "evaluate_run",
    "evaluate_scores",
    "export_heatmap",
    "fpr_at_tpr",
    "load_model",
    "lr_at",
    "masked_nll",
    "npd_map",
    "outlier_likelihood_min",
    "paste_object",
    "sample_anchor_sets",
    "score_histograms",
    "score_images",
    "supervised_contrastive",
    "total_loss",
    "train",
]
