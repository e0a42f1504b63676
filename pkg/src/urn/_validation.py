"""Input validation helpers shared by every module.

Maps, masks and images are plain numpy arrays.  These helpers check the
shape, dtype and value invariants once at the public boundary and return
arrays in the canonical dtype, so the numerical code below them can assume
well-formed input.
"""

from __future__ import annotations

import numpy as np

IGNORE_INDEX = 255
BACKGROUND = 0

SCORE_KINDS = ("logits", "probabilities")

# Tolerance on per-pixel class sums for probability maps.
PROB_SUM_ATOL = 1e-6


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""


def _shape_str(shape) -> str:
    return "x".join(str(int(s)) for s in shape)


def check_kind(kind: str) -> str:
    if kind not in SCORE_KINDS:
        raise ValidationError(f"kind must be one of {SCORE_KINDS}, got {kind!r}")
    return kind


def check_score_map(x, kind: str = "logits", name: str = "score map") -> np.ndarray:
    """Validate a C x H x W score map and return it as float64.

    For ``kind="probabilities"`` every value must lie in [0, 1] and each
    pixel's class column must sum to 1 within ``PROB_SUM_ATOL``.
    """
    check_kind(kind)
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValidationError(f"{name} must have shape (C, H, W), got {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"{name} has an empty dimension: {arr.shape}")
    if not np.issubdtype(arr.dtype, np.number) or np.iscomplexobj(arr):
        raise ValidationError(f"{name} must be real-valued, got dtype {arr.dtype}")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    if kind == "probabilities":
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError(f"{name} probabilities must lie in [0, 1]")
        sums = arr.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > PROB_SUM_ATOL:
            raise ValidationError(f"{name} class columns must sum to 1")
    return arr


def check_label_mask(
    m, num_classes: int | None = None, ignore_index: int = IGNORE_INDEX, name: str = "label mask"
) -> np.ndarray:
    """Validate an H x W integer label mask and return it as int64.

    Labels must lie in ``[0, num_classes)`` or equal ``ignore_index``.
    """
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must have shape (H, W), got {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"{name} has an empty dimension: {arr.shape}")
    if arr.dtype == bool or not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError(f"{name} must hold integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64, copy=False)
    valid = arr != ignore_index
    if np.any(arr[valid] < 0):
        raise ValidationError(f"{name} contains negative labels")
    if num_classes is not None and np.any(arr[valid] >= num_classes):
        bad = int(arr[valid].max())
        raise ValidationError(
            f"{name} contains label {bad}, expected labels in [0, {num_classes}) or {ignore_index}"
        )
    return arr


def check_gray_map(
    g, unit_interval: bool = True, name: str = "gray map"
) -> np.ndarray:
    """Validate an H x W real map and return it as float64."""
    arr = np.asarray(g)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must have shape (H, W), got {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"{name} has an empty dimension: {arr.shape}")
    if not np.issubdtype(arr.dtype, np.number) or np.iscomplexobj(arr):
        raise ValidationError(f"{name} must be real-valued, got dtype {arr.dtype}")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    if unit_interval and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def check_rgb_image(img, name: str = "image") -> np.ndarray:
    """Validate an H x W x 3 8-bit image and return it as uint8."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if min(arr.shape[:2]) < 1:
        raise ValidationError(f"{name} has an empty dimension: {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.integer) and arr.min() >= 0 and arr.max() <= 255:
            arr = arr.astype(np.uint8)
        else:
            raise ValidationError(f"{name} must be 8-bit, got dtype {arr.dtype}")
    return arr


def check_same_hw(shape_a, shape_b, name_a: str, name_b: str) -> None:
    """Raise when two arrays disagree on their spatial (H, W) size."""
    if tuple(shape_a) != tuple(shape_b):
        raise ValidationError(
            f"{name_a} is {_shape_str(shape_a)} but {name_b} is {_shape_str(shape_b)}"
        )
