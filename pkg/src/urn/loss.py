"""Pixel-weighted cross-entropy and the probability-weight baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import (
    IGNORE_INDEX,
    ValidationError,
    check_gray_map,
    check_label_mask,
    check_same_hw,
    check_score_map,
)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossReport:
    """Result of :func:`weighted_cross_entropy`.

    Attributes
    ----------
    per_pixel : ndarray of shape (H, W)
        Weighted loss per pixel; ignored pixels hold 0.
    mean : float
        Sum of ``per_pixel`` divided by the number of non-ignored pixels.
    weighted_pixel_count : float
        Sum of the weights over non-ignored pixels.
    grad : ndarray of shape (C, H, W)
        Gradient of ``mean`` with respect to the logits.
    """

    per_pixel: np.ndarray
    mean: float
    weighted_pixel_count: float
    grad: np.ndarray


def _gather(values: np.ndarray, target: np.ndarray) -> np.ndarray:
    """values[target[h, w], h, w] for every pixel; target must be in range."""
    return np.take_along_axis(values, target[None], axis=0)[0]


def weighted_cross_entropy(
    x, target, y=None, ignore_index: int = IGNORE_INDEX
) -> LossReport:
    """Cross-entropy per pixel, scaled by a weight mask.

    ``L = -Y * log(max(softmax(x)[target], 1e-12))``.  Ignored pixels add
    nothing and do not count towards the mean.  Omitting ``y`` uses all-ones
    weights.

    >>> r = weighted_cross_entropy(np.array([[[1.0]], [[0.0]]]), np.array([[0]]), np.array([[0.05]]))
    >>> round(r.mean, 8)
    0.01566308
    """
    x = check_score_map(x, kind="logits", name="logits")
    target = check_label_mask(target, num_classes=x.shape[0], ignore_index=ignore_index, name="target")
    check_same_hw(x.shape[1:], target.shape, "logits", "target")
    if y is None:
        y = np.ones(target.shape)
    else:
        y = check_gray_map(y, unit_interval=False, name="weights")
        check_same_hw(y.shape, target.shape, "weights", "target")
    valid = target != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValidationError("empty target: every pixel is ignored")

    z = x - x.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    safe_t = np.where(valid, target, 0)
    log_p = _gather(z, safe_t) - lse
    floored = log_p < np.log(LOG_FLOOR)
    log_p = np.where(floored, np.log(LOG_FLOOR), log_p)
    yv = np.where(valid, y, 0.0)
    per_pixel = -yv * log_p
    per_pixel[~valid] = 0.0

    prob = np.exp(z - lse)
    grad = prob
    rows, cols = np.nonzero(valid)
    grad[safe_t[rows, cols], rows, cols] -= 1.0
    # the floored loss is constant, so those pixels pass no gradient
    grad *= np.where(floored, 0.0, yv) / count
    return LossReport(
        per_pixel=per_pixel,
        mean=float(per_pixel.sum() / count),
        weighted_pixel_count=float(yv.sum()),
        grad=grad,
    )


def probability_weights(x, target, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Softmax probability of the target class at each pixel, as a weight.

    The weights are plain values and are treated as constants by the
    trainer, so no gradient flows through them.  Ignored pixels get 0.
    """
    x = check_score_map(x, kind="logits", name="logits")
    target = check_label_mask(target, num_classes=x.shape[0], ignore_index=ignore_index, name="target")
    check_same_hw(x.shape[1:], target.shape, "logits", "target")
    valid = target != ignore_index
    z = x - x.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    w = _gather(p, np.where(valid, target, 0))
    return np.where(valid, w, 0.0)
