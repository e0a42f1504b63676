"""Uncertainty map and loss-weight mask from a stack of scaled pseudo-masks.

The uncertainty of a pixel is the largest, over foreground classes, sample
variance of its scaled-mask outcomes across the N scale factors.  The map
is min-max normalised per image, inverted into a weight ``W = 1 - U``, and
thresholded into a two-valued mask ``Y``: 1 where ``W >= t``, ``t``
elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import IGNORE_INDEX, ValidationError, check_gray_map
from .crf import CrfParams
from .scaling import INPUT_KINDS, ScaledMaskStack, ScaleSet, build_scaled_mask_stack

VARIANCE_MODES = ("indicator", "raw_label")


@dataclass(frozen=True)
class WeightConfig:
    """Threshold ``t`` in [0, 1] and the variance outcome mode."""

    threshold: float = 0.05
    variance_mode: str = "indicator"

    def __post_init__(self):
        t = self.threshold
        if isinstance(t, bool) or not isinstance(t, (int, float, np.floating, np.integer)):
            raise ValidationError(f"threshold must be a number, got {t!r}")
        if not math.isfinite(t) or not 0.0 <= t <= 1.0:
            raise ValidationError(f"threshold must lie in [0, 1], got {t}")
        object.__setattr__(self, "threshold", float(t))
        if self.variance_mode not in VARIANCE_MODES:
            raise ValidationError(
                f"variance_mode must be one of {VARIANCE_MODES}, got {self.variance_mode!r}"
            )


def variance_over_scales(stack, mode: str = "indicator") -> np.ndarray:
    """Per-class sample variance over the scale axis.

    Parameters
    ----------
    stack : ScaledMaskStack or ndarray of shape (C_bar, N, H, W)
        For a bare array, class slice ``k`` is taken to hold restricted
        label ``k + 1`` (background is label 0).
    mode : {"indicator", "raw_label"}
        ``indicator`` scores each scale 1 when the pixel carries the slice's
        class and 0 otherwise.  ``raw_label`` uses the label value itself,
        which makes the result depend on class numbering.

    Returns
    -------
    ndarray of shape (C_bar, H, W)
        Variance with the ``1 / (N - 1)`` divisor.
    """
    if mode not in VARIANCE_MODES:
        raise ValidationError(f"mode must be one of {VARIANCE_MODES}, got {mode!r}")
    masks = stack.masks if isinstance(stack, ScaledMaskStack) else np.asarray(stack)
    if masks.ndim != 4:
        raise ValidationError(f"mask stack must have shape (C_bar, N, H, W), got {masks.shape}")
    if masks.shape[1] < 2:
        raise ValidationError("variance undefined for fewer than two scales")
    if mode == "indicator":
        labels = np.arange(1, masks.shape[0] + 1).reshape(-1, 1, 1, 1)
        outcome = (masks == labels).astype(np.float64)
    else:
        outcome = masks.astype(np.float64)
    return outcome.var(axis=1, ddof=1)


def uncertainty_map(variances) -> np.ndarray:
    """Class-agnostic uncertainty: max over classes, then min-max to [0, 1].

    A map with max equal to min (including all zeros) gives all zeros.
    """
    v = np.asarray(variances, dtype=np.float64)
    if v.ndim != 3 or v.shape[0] < 1:
        raise ValidationError(f"variances must have shape (C_bar, H, W) with C_bar >= 1, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("variances contain non-finite values")
    u = v.max(axis=0)
    lo, hi = u.min(), u.max()
    if hi == lo:
        return np.zeros_like(u)
    return (u - lo) / (hi - lo)


def weight_mask(u, cfg: WeightConfig | float | None = None) -> np.ndarray:
    """Two-valued loss weight from an uncertainty map.

    ``W = 1 - U``; the result is 1 where ``W >= t`` and ``t`` elsewhere.
    ``cfg`` may be a :class:`WeightConfig` or a bare threshold.

    >>> weight_mask(np.array([[0.0, 0.9, 0.96]]), 0.05)
    array([[1.  , 1.  , 0.05]])
    """
    if cfg is None:
        cfg = WeightConfig()
    elif not isinstance(cfg, WeightConfig):
        cfg = WeightConfig(threshold=cfg)
    u = check_gray_map(u, name="uncertainty map")
    w = 1.0 - u
    t = cfg.threshold
    return np.where(w >= t, 1.0, t)


def estimate_uncertainty(
    x,
    img,
    m,
    scales: ScaleSet | None = None,
    crf: CrfParams | None = None,
    use_crf: bool = True,
    *,
    variance_mode: str = "indicator",
    kind: str = "logits",
    crf_method: str = "fast",
    ignore_index: int = IGNORE_INDEX,
) -> np.ndarray:
    """Uncertainty map for one image, from model output to normalised U.

    Chains :func:`~urn.scaling.build_scaled_mask_stack`,
    :func:`variance_over_scales` and :func:`uncertainty_map`.
    """
    scales = ScaleSet.from_preset("voc") if scales is None else scales
    stack = build_scaled_mask_stack(
        x, img, m, scales, crf, use_crf, kind=kind, crf_method=crf_method, ignore_index=ignore_index
    )
    return uncertainty_map(variance_over_scales(stack, variance_mode))


class URNWeighter(TransformerMixin, BaseEstimator):
    """Turn (score map, image, pseudo-mask) triples into loss-weight masks.

    The weighter has no learned state: ``fit`` only validates the
    configuration, and the transform methods work without it.
    ``transform`` returns one weight mask per triple as a list, since images
    may differ in size.

    Parameters
    ----------
    scales : str or sequence of float
        Preset name (``"voc"``, ``"coco"``), comma-separated factors, or a
        sequence of factors.
    threshold : float
        Weight ``t`` given to uncertain pixels.
    variance_mode : {"indicator", "raw_label"}
    use_crf : bool
    crf : CrfParams, optional
    kind : {"logits", "probabilities", "scores"}
        How the score maps are read.
    crf_method : {"fast", "naive"}
    ignore_index : int
    """

    def __init__(
        self,
        scales="voc",
        threshold=0.05,
        variance_mode="indicator",
        use_crf=True,
        crf=None,
        kind="logits",
        crf_method="fast",
        ignore_index=IGNORE_INDEX,
    ):
        self.scales = scales
        self.threshold = threshold
        self.variance_mode = variance_mode
        self.use_crf = use_crf
        self.crf = crf
        self.kind = kind
        self.crf_method = crf_method
        self.ignore_index = ignore_index

    def _resolve(self) -> tuple[ScaleSet, WeightConfig, CrfParams]:
        if isinstance(self.scales, ScaleSet):
            scale_set = self.scales
        elif isinstance(self.scales, str):
            scale_set = ScaleSet.parse(self.scales)
        else:
            scale_set = ScaleSet(tuple(self.scales))
        if self.kind not in INPUT_KINDS:
            raise ValidationError(f"kind must be one of {INPUT_KINDS}, got {self.kind!r}")
        crf = CrfParams() if self.crf is None else self.crf
        return scale_set, WeightConfig(self.threshold, self.variance_mode), crf

    def fit(self, X=None, y=None):
        """Validate the configuration; no data is needed."""
        self.scale_set_, self.weight_config_, self.crf_params_ = self._resolve()
        return self

    def uncertainty(self, x, img, m) -> np.ndarray:
        """Normalised uncertainty map for one image."""
        scale_set, cfg, crf = self._resolve()
        return estimate_uncertainty(
            x, img, m, scale_set, crf, self.use_crf,
            variance_mode=cfg.variance_mode, kind=self.kind,
            crf_method=self.crf_method, ignore_index=self.ignore_index,
        )

    def weights(self, x, img, m) -> np.ndarray:
        """Weight mask for one image."""
        return weight_mask(self.uncertainty(x, img, m), self._resolve()[1])

    def transform(self, X) -> list[np.ndarray]:
        """Weight masks for an iterable of ``(score_map, image, mask)`` triples."""
        return [self.weights(x, img, m) for x, img, m in X]
