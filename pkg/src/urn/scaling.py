"""Response scaling: perturb one class's probability and record the argmax.

For every foreground class present in a pseudo-mask and every scale factor
``s``, the class's probability channel is raised to the power ``s`` (wider
response for ``s < 1``, narrower for ``s > 1``), the map is renormalised,
optionally refined with the dense CRF, and reduced to a label mask.  The
resulting C_bar x N x H x W stack is what the uncertainty module measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import (
    BACKGROUND,
    IGNORE_INDEX,
    ValidationError,
    check_label_mask,
    check_rgb_image,
    check_same_hw,
    check_score_map,
)
from .core import present_classes, softmax_over_classes
from .crf import CrfParams, ImageRefiner

SCALE_PRESETS = {
    "voc": (0.15, 0.2, 0.25, 4.0, 5.0, 6.0),
    "coco": (0.4, 0.5, 0.6, 2.0, 3.0, 4.0),
}

INPUT_KINDS = ("logits", "probabilities", "scores")


@dataclass(frozen=True)
class ScaleSet:
    """Ordered scale factors, at least two, all finite and positive."""

    factors: tuple[float, ...]
    preset: str = "custom"

    def __post_init__(self):
        factors = tuple(float(f) for f in self.factors)
        object.__setattr__(self, "factors", factors)
        if len(factors) < 2:
            raise ValidationError("a scale set needs at least two factors")
        if not all(math.isfinite(f) and f > 0 for f in factors):
            raise ValidationError(f"scale factors must be finite and > 0, got {factors}")
        if self.preset not in (*SCALE_PRESETS, "custom"):
            raise ValidationError(f"unknown preset {self.preset!r}")

    @classmethod
    def from_preset(cls, name: str) -> "ScaleSet":
        if name not in SCALE_PRESETS:
            raise ValidationError(f"unknown scale preset {name!r}; choose from {sorted(SCALE_PRESETS)}")
        return cls(SCALE_PRESETS[name], preset=name)

    @classmethod
    def parse(cls, spec: str) -> "ScaleSet":
        """Build from a preset name or a comma-separated list like ``"0.5,2"``."""
        spec = spec.strip()
        if spec in SCALE_PRESETS:
            return cls.from_preset(spec)
        try:
            factors = tuple(float(tok) for tok in spec.split(",") if tok.strip())
        except ValueError:
            raise ValidationError(f"cannot parse scale factors from {spec!r}") from None
        return cls(factors)

    def __len__(self) -> int:
        return len(self.factors)

    def __str__(self) -> str:
        return self.preset if self.preset != "custom" else ",".join(repr(f) for f in self.factors)


@dataclass(frozen=True)
class ScaledMaskStack:
    """Label masks for every (foreground class, scale factor) pair.

    Attributes
    ----------
    masks : ndarray of shape (C_bar, N, H, W)
        Labels in the restricted space ``[0, len(channel_indices))``.
    channel_indices : tuple of int
        Original class of each selected channel; entry 0 is background.
    factors : tuple of float
        The N scale factors, in stack order.
    """

    masks: np.ndarray
    channel_indices: tuple[int, ...]
    factors: tuple[float, ...]
    class_labels: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        masks = np.array(self.masks)
        if masks.ndim != 4:
            raise ValidationError(f"mask stack must have shape (C_bar, N, H, W), got {masks.shape}")
        n_sel = len(self.channel_indices)
        if masks.shape[0] != n_sel - 1 or masks.shape[1] != len(self.factors):
            raise ValidationError(
                f"mask stack shape {masks.shape} does not match {n_sel - 1} classes "
                f"x {len(self.factors)} scales"
            )
        if not np.issubdtype(masks.dtype, np.integer):
            raise ValidationError(f"mask stack must hold integers, got dtype {masks.dtype}")
        if masks.size and (masks.min() < 0 or masks.max() >= n_sel):
            raise ValidationError("mask stack holds labels outside the selected channels")
        masks.flags.writeable = False
        object.__setattr__(self, "masks", masks)
        # restricted label of each foreground class slice
        object.__setattr__(self, "class_labels", tuple(range(1, n_sel)))

    @property
    def class_indices(self) -> tuple[int, ...]:
        """Original indices of the C_bar foreground classes."""
        return self.channel_indices[1:]


def select_channels(x, m, ignore_index: int = IGNORE_INDEX) -> tuple[np.ndarray, list[int]]:
    """Keep background plus the classes present in ``m``.

    Returns the sub-map and the original class index of each kept channel.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValidationError(f"score map must have shape (C, H, W), got {x.shape}")
    m = check_label_mask(m, num_classes=x.shape[0], ignore_index=ignore_index, name="pseudo-mask")
    check_same_hw(x.shape[1:], m.shape, "score map", "pseudo-mask")
    if np.all(m == ignore_index):
        raise ValidationError("empty pseudo-mask: every pixel is ignored")
    fg = present_classes(m, include_background=False, ignore_index=ignore_index)
    indices = [BACKGROUND] + fg
    return x[indices], indices


def _scale_and_renormalize(values: np.ndarray, channel: int, s: float) -> np.ndarray:
    out = values.copy()
    out[channel] = values[channel] ** s
    out /= out.sum(axis=0, keepdims=True)
    return out


def _check_scale(s) -> float:
    if isinstance(s, bool) or not np.isscalar(s):
        raise ValidationError(f"scale factor must be a real number, got {s!r}")
    s = float(s)
    if not math.isfinite(s) or s <= 0:
        raise ValidationError(f"scale factor must be finite and > 0, got {s}")
    return s


def scale_channel(x, channel: int, s: float) -> np.ndarray:
    """Raise one channel of a probability map to the power ``s`` and renormalise.

    ``s = 1`` returns an unchanged copy.  Because every channel is divided
    by the same per-pixel sum, the order of the channels at each pixel is
    the order of the unnormalised values.
    """
    x = check_score_map(x, kind="probabilities", name="probabilities")
    s = _check_scale(s)
    if not 0 <= channel < x.shape[0]:
        raise ValidationError(f"channel {channel} out of range for {x.shape[0]} classes")
    if s == 1.0:
        return x.copy()
    return _scale_and_renormalize(x, channel, s)


def _to_probabilities(x, kind: str) -> np.ndarray:
    if kind == "logits":
        return softmax_over_classes(x)
    if kind == "probabilities":
        return check_score_map(x, kind="probabilities", name="probabilities")
    if kind == "scores":
        x = check_score_map(x, kind="logits", name="scores")
        if x.min() <= 0:
            raise ValidationError("raw scores must be strictly positive")
        return x
    raise ValidationError(f"kind must be one of {INPUT_KINDS}, got {kind!r}")


def build_scaled_mask_stack(
    x,
    img,
    m,
    scales: ScaleSet,
    crf: CrfParams | None = None,
    use_crf: bool = True,
    *,
    kind: str = "logits",
    crf_method: str = "fast",
    ignore_index: int = IGNORE_INDEX,
) -> ScaledMaskStack:
    """Scaled pseudo-masks for every present foreground class and scale factor.

    Parameters
    ----------
    x : ndarray of shape (C, H, W)
        Model output for one image.
    img : ndarray of shape (H, W, 3)
        The image, used by the CRF.
    m : ndarray of shape (H, W)
        Pseudo-mask whose present classes are perturbed.
    scales : ScaleSet
    crf : CrfParams, optional
        Kernel parameters; defaults to ``CrfParams()``.
    use_crf : bool
        Refine every scaled map with the dense CRF before the argmax.
    kind : {"logits", "probabilities", "scores"}
        How to read ``x``.  Logits are softmaxed first.  ``"scores"`` takes
        strictly positive raw scores and exponentiates them directly,
        renormalising afterwards.
    crf_method : {"fast", "naive"}

    Returns
    -------
    ScaledMaskStack
    """
    if not isinstance(scales, ScaleSet):
        raise ValidationError("scales must be a ScaleSet")
    img = check_rgb_image(img)
    p = _to_probabilities(x, kind)
    check_same_hw(p.shape[1:], img.shape[:2], "score map", "image")
    sel, indices = select_channels(p, m, ignore_index=ignore_index)
    n_fg = len(indices) - 1
    if n_fg == 0:
        raise ValidationError("empty foreground: the pseudo-mask has no foreground class")
    refine = ImageRefiner(img, crf, crf_method) if use_crf else None
    dtype = np.uint8 if len(indices) <= 256 else np.uint16
    masks = np.empty((n_fg, len(scales), *img.shape[:2]), dtype=dtype)
    for k in range(1, n_fg + 1):
        # raw scores are put on the simplex only after exponentiation
        maps = np.stack([
            sel.copy() if s == 1.0 and kind != "scores" else _scale_and_renormalize(sel, k, s)
            for s in scales.factors
        ])
        if refine is not None:
            maps = refine(maps)
        masks[k - 1] = np.argmax(maps, axis=1)
    return ScaledMaskStack(masks, tuple(indices), scales.factors)
