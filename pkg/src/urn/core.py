"""Elementary per-pixel reductions over C x H x W score maps."""

from __future__ import annotations

import numpy as np

from ._validation import BACKGROUND, IGNORE_INDEX, check_label_mask, check_score_map


def softmax_over_classes(x) -> np.ndarray:
    """Per-pixel softmax of a logit map along the class axis.

    Each pixel's maximum logit is subtracted first, so large logits do not
    overflow.

    >>> softmax_over_classes(np.array([[[1.0]], [[0.0]]])).ravel().round(7)
    array([0.7310586, 0.2689414])
    """
    x = check_score_map(x, kind="logits", name="logits")
    z = x - x.max(axis=0, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=0, keepdims=True)
    return z


def log_softmax_over_classes(x) -> np.ndarray:
    """Per-pixel log-softmax, stabilised the same way as the softmax."""
    x = check_score_map(x, kind="logits", name="logits")
    z = x - x.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def argmax_over_classes(x) -> np.ndarray:
    """Index of the maximal class at each pixel.

    Ties go to the lowest class index, which is what ``np.argmax`` does.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] < 1:
        raise ValueError(f"score map must have shape (C, H, W) with C >= 1, got {x.shape}")
    return np.argmax(x, axis=0).astype(np.int64)


def present_classes(
    m, include_background: bool = False, ignore_index: int = IGNORE_INDEX
) -> list[int]:
    """Sorted class labels that occur in a mask.

    The ignore label never counts.  Background (class 0) is left out unless
    ``include_background`` is set.
    """
    m = check_label_mask(m, ignore_index=ignore_index)
    labels = np.unique(m[m != ignore_index])
    if not include_background:
        labels = labels[labels != BACKGROUND]
    return [int(c) for c in labels]
