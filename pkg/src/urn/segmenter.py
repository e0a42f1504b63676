"""Per-pixel linear softmax segmenter trained by minibatch SGD.

Every pixel is described by 11 features: its RGB values scaled to [0, 1],
its row and column scaled to [0, 1], and the mean and standard deviation
of each RGB channel over the 3x3 window around it (window indices clamped
to the image).  A linear layer maps the features to per-class logits.

Training minimises the mean weighted cross-entropy over non-ignored pixels
with plain minibatch SGD.  The pixel order of every epoch comes from a
``numpy.random.default_rng(seed)`` permutation, so a fixed seed fixes the
whole parameter trajectory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    IGNORE_INDEX,
    ValidationError,
    check_gray_map,
    check_label_mask,
    check_rgb_image,
    check_same_hw,
)
from .crf import CrfParams, refine_fast
from .storage import StorageError

N_FEATURES = 11
MODEL_MAGIC = b"URNM"
MODEL_VERSION = 1
REWEIGHT_MODES = (None, "probability")


class ModelFormatError(StorageError):
    """Raised when a model file is not a valid URNM file."""


def extract_features(img) -> np.ndarray:
    """Per-pixel features of an RGB image.

    Returns
    -------
    ndarray of shape (H, W, 11)
        ``[r, g, b, row, col, mean_r, mean_g, mean_b, std_r, std_g, std_b]``.
    """
    img = check_rgb_image(img)
    h, w = img.shape[:2]
    rgb = img.astype(np.float64) / 255.0
    row = np.arange(h, dtype=np.float64) / (h - 1) if h > 1 else np.zeros(h)
    col = np.arange(w, dtype=np.float64) / (w - 1) if w > 1 else np.zeros(w)

    # nine shifted copies of the edge-padded image form the clamped windows
    pad = np.pad(rgb, ((1, 1), (1, 1), (0, 0)), mode="edge")
    windows = np.stack([pad[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)])
    mean = windows.mean(axis=0)
    std = np.sqrt(((windows - mean) ** 2).mean(axis=0))

    out = np.empty((h, w, N_FEATURES))
    out[..., 0:3] = rgb
    out[..., 3] = row[:, None]
    out[..., 4] = col[None, :]
    out[..., 5:8] = mean
    out[..., 8:11] = std
    return out


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings.  ``reweight="probability"`` multiplies every pixel's
    weight by the model's current probability of its target class."""

    learning_rate: float = 0.5
    epochs: int = 10
    batch_size: int = 512
    seed: int = 0
    reweight: str | None = None

    def __post_init__(self):
        if not self.learning_rate > 0 or not np.isfinite(self.learning_rate):
            raise ValidationError(f"learning_rate must be finite and > 0, got {self.learning_rate}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValidationError(f"epochs must be a non-negative integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValidationError(f"batch_size must be a positive integer, got {self.batch_size}")
        if self.reweight not in REWEIGHT_MODES:
            raise ValidationError(f"reweight must be one of {REWEIGHT_MODES}, got {self.reweight!r}")


@dataclass(frozen=True)
class ToyModel:
    """Linear per-pixel classifier: ``logits = weights @ features + bias``."""

    weights: np.ndarray
    bias: np.ndarray
    config: TrainConfig | None = None
    loss_curve: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0] or w.shape[0] < 1:
            raise ValidationError(f"inconsistent model shapes {w.shape} and {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("model parameters must be finite")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, n_classes: int, n_features: int = N_FEATURES) -> "ToyModel":
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes))


def _pixel_table(dataset, n_classes: int, ignore_index: int):
    """Stack the non-ignored pixels of a dataset into (features, targets, weights)."""
    feats, targets, weights = [], [], []
    for item in dataset:
        if len(item) == 2:
            img, m = item
            y = None
        else:
            img, m, y = item
        img = check_rgb_image(img)
        m = check_label_mask(m, num_classes=n_classes, ignore_index=ignore_index, name="target")
        check_same_hw(img.shape[:2], m.shape, "image", "target")
        valid = m != ignore_index
        feats.append(extract_features(img)[valid])
        targets.append(m[valid])
        if y is None:
            weights.append(np.ones(int(valid.sum())))
        else:
            y = check_gray_map(y, unit_interval=False, name="weights")
            check_same_hw(y.shape, m.shape, "weights", "target")
            weights.append(y[valid])
    if not feats:
        raise ValidationError("empty dataset")
    f = np.concatenate(feats)
    if f.shape[0] == 0:
        raise ValidationError("empty target: every pixel of every mask is ignored")
    return f, np.concatenate(targets), np.concatenate(weights)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _batch_gradient(fb, tb, yb, w, b, reweight):
    """Summed weighted loss of a batch and its gradients, divided by batch size."""
    m = tb.size
    p = _softmax_rows(fb @ w.T + b)
    rows = np.arange(m)
    pt = p[rows, tb]
    if reweight == "probability":
        # the probability acts as a constant weight; no gradient flows through it
        yb = yb * pt
    total = float(np.sum(-yb * np.log(np.maximum(pt, 1e-12))))
    g = p
    g[rows, tb] -= 1.0
    g *= yb[:, None] / m
    return total, g.T @ fb, g.sum(axis=0)


def _sgd(f, t, y, n_classes, cfg: TrainConfig, init: ToyModel | None = None):
    n, d = f.shape
    w = np.zeros((n_classes, d)) if init is None else init.weights.copy()
    b = np.zeros(n_classes) if init is None else init.bias.copy()
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb = _batch_gradient(f[idx], t[idx], y[idx], w, b, cfg.reweight)
            total += loss
            w -= lr * gw
            b -= lr * gb
        curve.append(total / n)
    return w, b, curve


def loss_and_gradient(model: ToyModel, dataset, ignore_index: int = IGNORE_INDEX):
    """Mean weighted cross-entropy of ``model`` over every non-ignored pixel
    of ``dataset``, with its gradients.

    This is the objective a single full-dataset SGD batch descends.

    Returns
    -------
    loss : float
    grad_weights : ndarray of shape (C, 11)
    grad_bias : ndarray of shape (C,)
    """
    f, t, y = _pixel_table(list(dataset), model.n_classes, ignore_index)
    total, gw, gb = _batch_gradient(f, t, y, model.weights, model.bias, None)
    return total / t.size, gw, gb


def train(dataset, config: TrainConfig | None = None, n_classes: int | None = None,
          ignore_index: int = IGNORE_INDEX) -> ToyModel:
    """Fit a :class:`ToyModel` by minibatch SGD.

    Parameters
    ----------
    dataset : sequence of (image, target) or (image, target, weights)
        Weights default to 1 for every pixel.
    config : TrainConfig, optional
    n_classes : int, optional
        Defaults to the largest target label plus one.

    Returns
    -------
    ToyModel
        With ``loss_curve`` holding the mean weighted loss of every epoch.
    """
    cfg = TrainConfig() if config is None else config
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("empty dataset")
    if n_classes is None:
        labels = [np.asarray(item[1]) for item in dataset]
        valid = [m[m != ignore_index] for m in labels]
        if not any(v.size for v in valid):
            raise ValidationError("empty target: every pixel of every mask is ignored")
        n_classes = int(max(int(v.max()) for v in valid if v.size)) + 1
    f, t, y = _pixel_table(dataset, n_classes, ignore_index)
    w, b, curve = _sgd(f, t, y, n_classes, cfg)
    return ToyModel(w, b, cfg, tuple(curve))


def predict(model: ToyModel, img) -> np.ndarray:
    """Logit map of shape (C, H, W) for one image."""
    f = extract_features(img)
    if model.weights.shape[1] != f.shape[2]:
        raise ValidationError(
            f"model expects {model.weights.shape[1]} features, image gives {f.shape[2]}"
        )
    logits = f @ model.weights.T + model.bias
    return np.ascontiguousarray(logits.transpose(2, 0, 1))


def distill_relabel(teacher: ToyModel, images, crf: CrfParams | None = None) -> list[np.ndarray]:
    """Teacher predictions as training masks, optionally CRF-refined first."""
    masks = []
    for img in images:
        logits = predict(teacher, img)
        if crf is not None:
            z = logits - logits.max(axis=0, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=0, keepdims=True)
            logits = refine_fast(p, img, crf)
        masks.append(np.argmax(logits, axis=0).astype(np.int64))
    return masks


def save_model(model: ToyModel, path) -> None:
    """Write ``model`` in the URNM binary format.

    Layout, little-endian: magic ``b"URNM"``, then u32 version, u32 class
    count C, u32 feature count D, then C*D weights (row-major) and C biases
    as float64.
    """
    c, d = model.weights.shape
    header = MODEL_MAGIC + struct.pack("<III", MODEL_VERSION, c, d)
    body = model.weights.astype("<f8").tobytes() + model.bias.astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_model(path) -> ToyModel:
    """Read a model written by :func:`save_model`."""
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a URNM model file")
    if len(data) < 16:
        raise ModelFormatError(f"{path}: truncated header")
    version, c, d = struct.unpack("<III", data[4:16])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    expected = 16 + 8 * (c * d + c)
    if len(data) != expected:
        raise ModelFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64)
    return ToyModel(values[: c * d].reshape(c, d), values[c * d:])


class PixelSoftmaxSegmenter(ClassifierMixin, BaseEstimator):
    """Estimator interface over :func:`train` and :func:`predict`.

    ``X`` is a sequence of RGB images and ``y`` a matching sequence of label
    masks.  ``score`` reports mean pixel accuracy over non-ignored pixels.

    Parameters
    ----------
    n_classes : int, optional
        Defaults to the largest training label plus one.
    learning_rate, epochs, batch_size, seed, reweight
        See :class:`TrainConfig`.
    ignore_index : int
    """

    def __init__(self, n_classes=None, learning_rate=0.5, epochs=10, batch_size=512, seed=0,
                 reweight=None, ignore_index=IGNORE_INDEX):
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.reweight = reweight
        self.ignore_index = ignore_index

    def _config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed, self.reweight)

    def fit(self, X, y, sample_weight=None):
        """Train on images ``X`` with masks ``y`` and optional weight masks."""
        X, y = list(X), list(y)
        if len(X) != len(y):
            raise ValidationError(f"got {len(X)} images but {len(y)} masks")
        if sample_weight is None:
            data = list(zip(X, y))
        else:
            sample_weight = list(sample_weight)
            if len(sample_weight) != len(X):
                raise ValidationError(f"got {len(X)} images but {len(sample_weight)} weight masks")
            data = list(zip(X, y, sample_weight))
        model = train(data, self._config(), self.n_classes, self.ignore_index)
        self.model_ = model
        self.coef_ = model.weights
        self.intercept_ = model.bias
        self.classes_ = np.arange(model.n_classes)
        self.n_features_in_ = N_FEATURES
        self.loss_curve_ = list(model.loss_curve)
        return self

    def decision_function(self, X) -> list[np.ndarray]:
        """Logit maps, one (C, H, W) array per image."""
        check_is_fitted(self, "model_")
        return [predict(self.model_, img) for img in X]

    def predict_proba(self, X) -> list[np.ndarray]:
        out = []
        for z in self.decision_function(X):
            z = z - z.max(axis=0, keepdims=True)
            p = np.exp(z)
            out.append(p / p.sum(axis=0, keepdims=True))
        return out

    def predict(self, X) -> list[np.ndarray]:
        """Label masks, one per image."""
        return [np.argmax(z, axis=0).astype(np.int64) for z in self.decision_function(X)]

    def score(self, X, y, sample_weight=None) -> float:
        correct = total = 0
        for pred, m in zip(self.predict(X), y):
            m = np.asarray(m)
            valid = m != self.ignore_index
            correct += int(np.sum(pred[valid] == m[valid]))
            total += int(valid.sum())
        if total == 0:
            raise ValidationError("no labelled pixels to score")
        return correct / total
