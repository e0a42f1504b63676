"""The full reweighting loop over a dataset directory.

1. Train a baseline model on the noisy masks.
2. Predict every training image with it.
3. Estimate the uncertainty map of every training image from its
   prediction, image and noisy mask, and turn it into a weight mask.
4. Store the weight masks as 8-bit PNGs and read them back, so retraining
   sees exactly the quantized weights that are on disk.
5. Retrain from scratch with the weights.  Optionally also retrain with
   the probability baseline, which weights every pixel by the baseline
   model's softmax probability of its mask label.
6. Score every model on the held-out images against clean ground truth.

Per-image work runs on a thread pool.  Results are collected in image
order and every reduction runs sequentially, so the thread count never
changes an output byte.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .crf import CrfParams
from .loss import probability_weights
from .metrics import format_report, miou, noise_auroc
from .scaling import ScaleSet
from .segmenter import ToyModel, TrainConfig, predict, save_model, train
from .storage import (
    read_weight_png,
    write_combined,
    write_gray_map,
    write_heatmap,
    write_score_map,
    write_weight_png,
)
from .synth import SynthDataset, read_dataset
from .uncertainty import WeightConfig, estimate_uncertainty, weight_mask

THREADS_ENV = "URN_THREADS"

_CRF_PREFIX = "crf_"


def default_threads() -> int:
    """Thread count from the ``URN_THREADS`` environment variable, else 1."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def map_ordered(func, items, threads: int) -> list:
    """``[func(x) for x in items]``, possibly on a thread pool; order is kept."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


@dataclass(frozen=True)
class RunConfig:
    """Every setting of a loop run.  CRF kernel settings carry a ``crf_``
    prefix so the record maps one-to-one onto flat ``key = value`` files."""

    dataset: str = ""
    output: str = ""
    scales: str = "voc"
    threshold: float = 0.05
    variance_mode: str = "indicator"
    use_crf: bool = True
    crf_method: str = "fast"
    crf_iterations: int = 10
    crf_spatial_weight: float = 3.0
    crf_spatial_stddev: float = 3.0
    crf_bilateral_weight: float = 4.0
    crf_bilateral_spatial_stddev: float = 49.0
    crf_bilateral_color_stddev: float = 5.0
    learning_rate: float = 0.5
    epochs: int = 10
    batch_size: int = 512
    holdout: float = 0.25
    probability_baseline: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.scale_set()
        self.weight_config()
        self.crf_params()
        self.train_config()
        if not 0.0 < self.holdout < 1.0:
            raise ValidationError(f"holdout must lie in (0, 1), got {self.holdout}")
        if self.crf_method not in ("fast", "naive"):
            raise ValidationError(f"crf_method must be 'fast' or 'naive', got {self.crf_method!r}")
        if int(self.threads) != self.threads or self.threads < 1:
            raise ValidationError(f"threads must be a positive integer, got {self.threads}")

    def scale_set(self) -> ScaleSet:
        return ScaleSet.parse(self.scales)

    def weight_config(self) -> WeightConfig:
        return WeightConfig(self.threshold, self.variance_mode)

    def crf_params(self) -> CrfParams:
        return CrfParams(**{
            f.name[len(_CRF_PREFIX):]: getattr(self, f.name)
            for f in fields(self)
            if f.name.startswith(_CRF_PREFIX) and f.name != "crf_method"
        })

    def train_config(self, reweight: str | None = None) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed, reweight)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from string or typed values, converting by field type."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValidationError(f"unknown setting {key!r}")
            kwargs[key] = _convert(key, raw, type(known[key].default))
        return cls(**kwargs)

    def to_lines(self) -> list[str]:
        return [f"{k} = {v}" for k, v in asdict(self).items()]


def _convert(key: str, raw, kind):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ValidationError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def split_indices(n: int, holdout: float) -> tuple[list[int], list[int]]:
    """The last ``round(n * holdout)`` images (at least one) form the test split."""
    n_test = min(max(1, int(round(n * holdout))), n - 1)
    if n < 2:
        raise ValidationError("need at least two images to split into train and test")
    return list(range(n - n_test)), list(range(n - n_test, n))


def uncertainty_or_zero(x, img, m, cfg: RunConfig) -> np.ndarray:
    """Uncertainty map of one image; all zeros when its mask has no foreground
    class, since then there is nothing to perturb."""
    if not np.any((m != 0) & (m != 255)):
        return np.zeros(m.shape)
    return estimate_uncertainty(
        x, img, m, cfg.scale_set(), cfg.crf_params(), cfg.use_crf,
        variance_mode=cfg.variance_mode, kind="logits", crf_method=cfg.crf_method,
    )


def evaluate_model(model: ToyModel, images, gts, n_classes: int, threads: int = 1):
    preds = map_ordered(lambda img: np.argmax(predict(model, img), axis=0), images, threads)
    return miou(preds, gts, n_classes)


@dataclass
class LoopResult:
    report: dict
    models: dict[str, ToyModel]
    uncertainty: list[np.ndarray]
    weights: list[np.ndarray]


def run_loop(data: SynthDataset, cfg: RunConfig, out: Path | None = None) -> LoopResult:
    """Run the loop on an in-memory dataset, writing artifacts when ``out`` is set."""
    n_classes = data.n_classes
    train_idx, test_idx = split_indices(len(data), cfg.holdout)
    images = [data.images[i] for i in train_idx]
    noisy = [data.noisy[i] for i in train_idx]
    threads = cfg.threads

    baseline = train(list(zip(images, noisy)), cfg.train_config(), n_classes)
    logits = map_ordered(lambda img: predict(baseline, img), images, threads)
    u_maps = map_ordered(lambda k: uncertainty_or_zero(logits[k], images[k], noisy[k], cfg),
                         range(len(images)), threads)
    wcfg = cfg.weight_config()
    y_maps = [weight_mask(u, wcfg) for u in u_maps]

    if out is not None:
        for sub in ("models", "scores", "uncertainty", "heatmaps", "weights", "combined"):
            (out / sub).mkdir(parents=True, exist_ok=True)

        def store(k):
            name = f"{train_idx[k]:04d}"
            write_score_map(out / "scores" / f"{name}.npy", logits[k], "logits")
            write_gray_map(out / "uncertainty" / f"{name}.npy", u_maps[k])
            write_heatmap(out / "heatmaps" / f"{name}.png", u_maps[k])
            write_weight_png(out / "weights" / f"{name}.png", y_maps[k])
            write_combined(out / "combined" / f"{name}.png", noisy[k], y_maps[k])
            return read_weight_png(out / "weights" / f"{name}.png")

        y_used = map_ordered(store, range(len(images)), threads)
    else:
        y_used = [np.floor(255.0 * y + 0.5) / 255.0 for y in y_maps]

    models = {"baseline": baseline}
    models["urn"] = train(list(zip(images, noisy, y_used)), cfg.train_config(), n_classes)
    if cfg.probability_baseline:
        # weights from the same detached baseline prediction the uncertainty uses
        p_maps = [probability_weights(x, m) for x, m in zip(logits, noisy)]
        models["probability"] = train(list(zip(images, noisy, p_maps)), cfg.train_config(), n_classes)

    test_images = [data.images[i] for i in test_idx]
    test_gt = [data.gt[i] for i in test_idx]
    report = {
        "n_train": len(train_idx),
        "n_test": len(test_idx),
        "threshold": cfg.threshold,
        "scales": str(cfg.scale_set()),
        "use_crf": cfg.use_crf,
    }
    for name, model in models.items():
        res = evaluate_model(model, test_images, test_gt, n_classes, threads)
        report[f"miou_{name}"] = res.mean
        for c, v in enumerate(res.per_class):
            report[f"iou_{name}_class{c}"] = float(v)
    aurocs = [noise_auroc(u, data.noise[i]) for i, u in zip(train_idx, u_maps)
              if 0 < data.noise[i].sum() < data.noise[i].size]
    if aurocs:
        report["noise_auroc_mean"] = float(np.mean(aurocs))
        report["noise_auroc_images"] = len(aurocs)
    report["weighted_pixel_share"] = float(np.mean([np.mean(y < 1.0) for y in y_used]))

    if out is not None:
        for name, model in models.items():
            save_model(model, out / "models" / f"{name}.urnm")
        (out / "config.txt").write_text("\n".join(replace(cfg, output="", threads=1).to_lines()) + "\n")
        (out / "report.txt").write_text(format_report(report, "urn"))
    return LoopResult(report, models, u_maps, y_used)


def run_urn(cfg: RunConfig) -> dict:
    """Run the loop on ``cfg.dataset`` and write everything under ``cfg.output``."""
    if not cfg.output:
        raise ValidationError("an output directory is required")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return run_loop(read_dataset(cfg.dataset), cfg, out).report
