"""Per-pixel loss weights for noisy segmentation masks.

Uncertainty is estimated by scaling one class's response at a time, refining
each scaled map with a dense CRF, and measuring how much the resulting masks
disagree.  Uncertain pixels get a small loss weight when a segmenter is
retrained on the noisy masks.
"""

__version__ = "0.1.0"

from ._validation import IGNORE_INDEX, ValidationError
from .crf import CrfParams, DenseCRF, refine_batch, refine_fast, refine_naive
from .loss import LossReport, probability_weights, weighted_cross_entropy
from .metrics import ConfusionMatrix, miou, noise_auroc
from .scaling import SCALE_PRESETS, ScaledMaskStack, ScaleSet, build_scaled_mask_stack, scale_channel
from .segmenter import (
    PixelSoftmaxSegmenter,
    ToyModel,
    TrainConfig,
    distill_relabel,
    extract_features,
    load_model,
    loss_and_gradient,
    predict,
    save_model,
    train,
)
from .synth import NoiseSpec, SynthConfig, generate, inject_noise
from .uncertainty import (
    URNWeighter,
    WeightConfig,
    estimate_uncertainty,
    uncertainty_map,
    variance_over_scales,
    weight_mask,
)

__all__ = [
    "IGNORE_INDEX",
    "SCALE_PRESETS",
    "ConfusionMatrix",
    "CrfParams",
    "DenseCRF",
    "LossReport",
    "NoiseSpec",
    "PixelSoftmaxSegmenter",
    "ScaleSet",
    "ScaledMaskStack",
    "SynthConfig",
    "ToyModel",
    "TrainConfig",
    "URNWeighter",
    "ValidationError",
    "WeightConfig",
    "build_scaled_mask_stack",
    "distill_relabel",
    "estimate_uncertainty",
    "extract_features",
    "generate",
    "inject_noise",
    "load_model",
    "loss_and_gradient",
    "miou",
    "noise_auroc",
    "predict",
    "probability_weights",
    "refine_batch",
    "refine_fast",
    "refine_naive",
    "save_model",
    "scale_channel",
    "train",
    "uncertainty_map",
    "variance_over_scales",
    "weight_mask",
    "weighted_cross_entropy",
]
