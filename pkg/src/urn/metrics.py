"""Segmentation and uncertainty quality measures.

mIoU follows the benchmark convention: confusion counts are summed over
the whole dataset before any division, and classes absent from both the
ground truth and the predictions are left out of the mean.  Noise
localization is scored as the AUROC of the uncertainty map for telling
noisy pixels from clean ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._validation import IGNORE_INDEX, ValidationError, check_gray_map, check_label_mask, check_same_hw


class ConfusionMatrix:
    """Pixel counts with ground truth along rows and predictions along columns.

    >>> cm = ConfusionMatrix(2)
    >>> cm.update(np.array([[0, 1]]), np.array([[0, 0]]))
    >>> cm.counts.tolist()
    [[1, 1], [0, 0]]
    """

    def __init__(self, n_classes: int, ignore_index: int = IGNORE_INDEX):
        if n_classes < 1:
            raise ValidationError(f"n_classes must be >= 1, got {n_classes}")
        self.n_classes = int(n_classes)
        self.ignore_index = ignore_index
        self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    def update(self, pred, gt) -> None:
        """Add one image.  Pixels ignored in ``gt`` are skipped."""
        c = self.n_classes
        gt = check_label_mask(gt, num_classes=c, ignore_index=self.ignore_index, name="ground truth")
        pred = check_label_mask(pred, num_classes=c, ignore_index=self.ignore_index, name="prediction")
        check_same_hw(pred.shape, gt.shape, "prediction", "ground truth")
        keep = gt != self.ignore_index
        if np.any(pred[keep] == self.ignore_index):
            raise ValidationError("prediction carries the ignore label on an evaluated pixel")
        flat = gt[keep] * c + pred[keep]
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValidationError("cannot add confusion matrices of different sizes")
        out = ConfusionMatrix(self.n_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both rows and columns."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        out = np.full(self.n_classes, np.nan)
        np.divide(tp, denom, out=out, where=denom > 0)
        return out


@dataclass(frozen=True)
class MiouResult:
    per_class: np.ndarray
    mean: float
    confusion: ConfusionMatrix


def miou(preds, gts, n_classes: int, ignore_index: int = IGNORE_INDEX) -> MiouResult:
    """Dataset-level mean IoU over paired prediction and ground-truth masks."""
    preds, gts = list(preds), list(gts)
    if not preds:
        raise ValidationError("empty input list")
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} predictions but {len(gts)} ground-truth masks")
    cm = ConfusionMatrix(n_classes, ignore_index)
    for p, g in zip(preds, gts):
        cm.update(p, g)
    ious = cm.iou()
    present = ~np.isnan(ious)
    mean = float(ious[present].mean()) if present.any() else float("nan")
    return MiouResult(per_class=ious, mean=mean, confusion=cm)


def noise_auroc(u, indicator) -> float:
    """AUROC of ``u`` as a score for the pixels flagged by ``indicator``.

    Uses the rank-sum form with midranks for ties, so a constant ``u``
    scores exactly 0.5.
    """
    u = check_gray_map(u, unit_interval=False, name="uncertainty map")
    ind = check_gray_map(indicator, unit_interval=False, name="noise indicator")
    check_same_hw(u.shape, ind.shape, "uncertainty map", "noise indicator")
    if not np.all((ind == 0) | (ind == 1)):
        raise ValidationError("noise indicator must be binary")
    pos = ind.ravel() == 1
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("degenerate noise indicator: needs both noisy and clean pixels")
    ranks = rankdata(u.ravel())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def format_report(values: dict[str, float], title: str = "report") -> str:
    """Readable lines followed by a ``[title]`` block of ``key=value`` lines.

    Floats are written with ``repr`` so the block round-trips exactly.
    """
    width = max((len(k) for k in values), default=0)
    lines = [f"{k.ljust(width)}  {v:.4f}" if isinstance(v, float) else f"{k.ljust(width)}  {v}"
             for k, v in values.items()]
    lines.append("")
    lines.append(f"[{title}]")
    lines.extend(f"{k}={v!r}" for k, v in values.items())
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, str]:
    """The ``key=value`` lines of a report, as strings."""
    out = {}
    in_block = False
    for line in text.splitlines():
        if line.startswith("[") and line.endswith("]"):
            in_block = True
            continue
        if in_block and "=" in line:
            k, _, v = line.partition("=")
            out[k] = v
    return out
