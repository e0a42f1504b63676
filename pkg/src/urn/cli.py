"""Command-line front end: ``urn <subcommand> [flags]``.

Every subcommand reads and writes directories of per-image files named by
a shared stem (``0007.png``, ``0007.npy``...).  Settings can also come
from a ``--config`` file of ``key = value`` lines whose keys are the long
flag names; flags given on the command line win.

Exit codes: 0 on success, 1 on invalid input or usage, 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import ValidationError
from .crf import CrfParams, ImageRefiner
from .loss import weighted_cross_entropy
from .metrics import format_report, miou, noise_auroc
from .scaling import ScaleSet
from .segmenter import TrainConfig, distill_relabel, load_model, predict, save_model, train
from .storage import (
    read_gray_map,
    read_mask_png,
    read_rgb_png,
    read_score_map,
    read_weight_png,
    write_combined,
    write_gray_map,
    write_heatmap,
    write_mask_png,
    write_score_map,
    write_weight_png,
)
from .synth import NoiseSpec, SynthConfig, read_manifest, write_dataset
from .uncertainty import estimate_uncertainty, weight_mask
from .workflow import RunConfig, default_threads, map_ordered, run_urn

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValidationError):
    """Bad command line or configuration file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ----------------------------------------------------------------


def _stems(directory, suffix: str) -> list[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: no such directory")
    stems = sorted(p.stem for p in directory.glob(f"*{suffix}"))
    if not stems:
        raise ValidationError(f"{directory}: no *{suffix} files found")
    return stems


def _checked(path, func, *args, **kwargs):
    """Run ``func`` on data read from ``path``; prefix errors with the path."""
    try:
        return func(*args, **kwargs)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _crf_params(args) -> CrfParams:
    return CrfParams(
        iterations=args.crf_iterations,
        spatial_weight=args.crf_spatial_weight,
        spatial_stddev=args.crf_spatial_stddev,
        bilateral_weight=args.crf_bilateral_weight,
        bilateral_spatial_stddev=args.crf_bilateral_spatial_stddev,
        bilateral_color_stddev=args.crf_bilateral_color_stddev,
    )


def _out_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_pairs(images, masks, weights=None):
    stems = _stems(masks, ".png")
    items = []
    for s in stems:
        img = read_rgb_png(Path(images) / f"{s}.png")
        m = read_mask_png(Path(masks) / f"{s}.png")
        if img.shape[:2] != m.shape:
            raise ValidationError(
                f"{Path(masks) / s}.png: expected shape {img.shape[:2]} to match its image, found {m.shape}"
            )
        if weights is None:
            items.append((img, m))
        else:
            y = read_weight_png(Path(weights) / f"{s}.png")
            if y.shape != m.shape:
                raise ValidationError(f"{Path(weights) / s}.png: expected shape {m.shape}, found {y.shape}")
            items.append((img, m, y))
    return stems, items


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = SynthConfig(
        n_images=args.n_images, height=args.height, width=args.width,
        n_shape_classes=args.shape_classes, size_range=(args.min_size, args.max_size), seed=args.seed,
    )
    spec = NoiseSpec(args.noise_mode, args.noise_radius, args.noise_fraction, args.seed)
    write_dataset(args.out, cfg, spec)
    print(f"wrote {cfg.n_images} images to {args.out}")


def cmd_train(args) -> None:
    _, items = _load_pairs(args.images, args.masks, args.weights)
    cfg = TrainConfig(args.learning_rate, args.epochs, args.batch_size, args.seed)
    model = train(items, cfg, args.n_classes)
    save_model(model, args.model)
    print(f"trained {model.n_classes}-class model, final loss {model.loss_curve[-1]:.6f}"
          if model.loss_curve else f"wrote untrained {model.n_classes}-class model")


def cmd_predict(args) -> None:
    model = load_model(args.model)
    out = _out_dir(args.out)
    stems = _stems(args.images, ".png")

    def one(s):
        path = Path(args.images) / f"{s}.png"
        write_score_map(out / f"{s}.npy", _checked(path, predict, model, read_rgb_png(path)), "logits")

    map_ordered(one, stems, args.threads)
    print(f"wrote {len(stems)} score maps to {out}")


def cmd_crf(args) -> None:
    out = _out_dir(args.out)
    params = _crf_params(args)
    stems = _stems(args.scores, ".npy")

    def one(s):
        path = Path(args.scores) / f"{s}.npy"
        x, kind = read_score_map(path)
        img = read_rgb_png(Path(args.images) / f"{s}.png")
        if kind == "logits":
            z = np.exp(x - x.max(axis=0, keepdims=True))
            x = z / z.sum(axis=0, keepdims=True)
        q = _checked(path, lambda: ImageRefiner(img, params, args.method)(x[None])[0])
        write_score_map(out / f"{s}.npy", q, "probabilities")

    map_ordered(one, stems, args.threads)
    print(f"refined {len(stems)} score maps into {out}")


def cmd_uncertainty(args) -> None:
    out = _out_dir(args.out)
    scales = ScaleSet.parse(args.scales)
    params = _crf_params(args)
    stems = _stems(args.scores, ".npy")

    def one(s):
        path = Path(args.scores) / f"{s}.npy"
        x, kind = read_score_map(path)
        img = read_rgb_png(Path(args.images) / f"{s}.png")
        m = read_mask_png(Path(args.masks) / f"{s}.png")
        u = _checked(path, estimate_uncertainty, x, img, m, scales, params, not args.no_crf,
                     variance_mode=args.variance_mode, kind=kind, crf_method=args.method)
        write_gray_map(out / f"{s}.npy", u)
        write_heatmap(out / f"{s}.png", u)

    map_ordered(one, stems, args.threads)
    print(f"wrote {len(stems)} uncertainty maps to {out}")


def cmd_weights(args) -> None:
    out = _out_dir(args.out)
    stems = _stems(args.uncertainty, ".npy")
    for s in stems:
        path = Path(args.uncertainty) / f"{s}.npy"
        y = _checked(path, weight_mask, read_gray_map(path), args.threshold)
        write_weight_png(out / f"{s}.png", y)
        if args.masks:
            m = read_mask_png(Path(args.masks) / f"{s}.png")
            combined = _out_dir(Path(out) / "combined")
            _checked(path, write_combined, combined / f"{s}.png", m, y)
    print(f"wrote {len(stems)} weight masks to {out}")


def cmd_loss(args) -> None:
    stems = _stems(args.scores, ".npy")
    totals, counts, weighted = [], [], []
    lines = []
    for s in stems:
        path = Path(args.scores) / f"{s}.npy"
        x, _ = read_score_map(path, kind="logits")
        m = read_mask_png(Path(args.masks) / f"{s}.png")
        y = read_weight_png(Path(args.weights) / f"{s}.png") if args.weights else None
        rep = _checked(path, weighted_cross_entropy, x, m, y)
        n = int(np.sum(m != 255))
        totals.append(rep.mean * n)
        counts.append(n)
        weighted.append(rep.weighted_pixel_count)
        lines.append(f"{s}  loss {rep.mean:.6f}  pixels {n}")
    report = {"images": len(stems), "mean_loss": float(np.sum(totals) / np.sum(counts)),
              "pixels": int(np.sum(counts)), "weight_sum": float(np.sum(weighted))}
    _emit("\n".join(lines) + "\n\n" + format_report(report, "loss"), args.report)


def cmd_distill(args) -> None:
    teacher = load_model(args.model)
    out = _out_dir(args.out)
    stems = _stems(args.images, ".png")
    crf = _crf_params(args) if args.crf else None

    def one(s):
        img = read_rgb_png(Path(args.images) / f"{s}.png")
        write_mask_png(out / f"{s}.png", distill_relabel(teacher, [img], crf)[0])

    map_ordered(one, stems, args.threads)
    print(f"wrote {len(stems)} relabeled masks to {out}")


def cmd_eval(args) -> None:
    if not args.pred and not args.uncertainty:
        raise UsageError("eval needs --pred/--gt and/or --uncertainty/--noise")
    report = {}
    if args.pred:
        if not args.gt:
            raise UsageError("--pred needs --gt")
        stems = _stems(args.gt, ".png")
        preds = [read_mask_png(Path(args.pred) / f"{s}.png") for s in stems]
        gts = [read_mask_png(Path(args.gt) / f"{s}.png") for s in stems]
        n_classes = args.n_classes or int(max(int(g[g != 255].max(initial=0)) for g in gts + preds)) + 1
        res = miou(preds, gts, n_classes)
        report["miou"] = res.mean
        for c, v in enumerate(res.per_class):
            report[f"iou_class{c}"] = float(v)
        report["pixels"] = res.confusion.total
    if args.uncertainty:
        if not args.noise:
            raise UsageError("--uncertainty needs --noise")
        scores = []
        for s in _stems(args.uncertainty, ".npy"):
            u = read_gray_map(Path(args.uncertainty) / f"{s}.npy")
            ind = read_weight_png(Path(args.noise) / f"{s}.png")
            if 0 < ind.sum() < ind.size:
                scores.append(_checked(Path(args.uncertainty) / f"{s}.npy", noise_auroc, u, ind))
        if not scores:
            raise ValidationError("no image has both noisy and clean pixels")
        report["noise_auroc_mean"] = float(np.mean(scores))
        report["noise_auroc_images"] = len(scores)
    _emit(format_report(report, "eval"), args.report)


def cmd_urn(args) -> None:
    values = {k: getattr(args, k) for k in RunConfig.__dataclass_fields__ if hasattr(args, k)}
    values["use_crf"] = not args.no_crf
    values["probability_baseline"] = not args.no_probability_baseline
    values["crf_method"] = args.method
    values["dataset"] = str(args.dataset)
    values["output"] = str(args.out)
    report = run_urn(RunConfig.from_mapping(values))
    print(format_report(report, "urn"), end="")


def cmd_viz(args) -> None:
    out = _out_dir(args.out)
    stems = _stems(args.uncertainty, ".npy")
    for s in stems:
        path = Path(args.uncertainty) / f"{s}.npy"
        _checked(path, write_heatmap, out / f"{s}.png", read_gray_map(path))
    print(f"wrote {len(stems)} heatmaps to {out}")


def _emit(text: str, path) -> None:
    if path:
        Path(path).write_text(text)
    print(text, end="")


# -- parser -----------------------------------------------------------------


def _add_crf_flags(p) -> None:
    d = CrfParams()
    p.add_argument("--crf-iterations", type=int, default=d.iterations)
    p.add_argument("--crf-spatial-weight", type=float, default=d.spatial_weight)
    p.add_argument("--crf-spatial-stddev", type=float, default=d.spatial_stddev)
    p.add_argument("--crf-bilateral-weight", type=float, default=d.bilateral_weight)
    p.add_argument("--crf-bilateral-spatial-stddev", type=float, default=d.bilateral_spatial_stddev)
    p.add_argument("--crf-bilateral-color-stddev", type=float, default=d.bilateral_color_stddev)
    p.add_argument("--method", choices=("fast", "naive"), default="fast", help="CRF inference route")


def _add_train_flags(p) -> None:
    d = TrainConfig()
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="file of 'key = value' lines (long flag names)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $URN_THREADS or 1)")

    parser = _Parser(prog="urn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    d = SynthConfig()
    p = add("synth", cmd_synth, "generate a synthetic dataset with noisy masks")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-images", type=int, default=d.n_images)
    p.add_argument("--height", type=int, default=d.height)
    p.add_argument("--width", type=int, default=d.width)
    p.add_argument("--shape-classes", type=int, default=d.n_shape_classes)
    p.add_argument("--min-size", type=int, default=d.size_range[0], help="smallest shape radius")
    p.add_argument("--max-size", type=int, default=d.size_range[1], help="largest shape radius")
    p.add_argument("--noise-mode", choices=("dilate", "erode", "mixed"), default="mixed")
    p.add_argument("--noise-radius", type=int, default=2)
    p.add_argument("--noise-fraction", type=float, default=0.5)

    p = add("train", cmd_train, "train the per-pixel model")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--weights", type=Path, help="weight-mask PNGs; all ones when omitted")
    p.add_argument("--model", type=Path, required=True, help="output model file")
    p.add_argument("--n-classes", type=int)
    _add_train_flags(p)

    p = add("predict", cmd_predict, "write logit score maps for every image")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("crf", cmd_crf, "refine score maps with the dense CRF")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_crf_flags(p)

    p = add("uncertainty", cmd_uncertainty, "uncertainty maps from score maps and pseudo-masks")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scales", default="voc", help="preset (voc, coco) or comma-separated factors")
    p.add_argument("--variance-mode", choices=("indicator", "raw_label"), default="indicator")
    p.add_argument("--no-crf", action="store_true")
    _add_crf_flags(p)

    p = add("weights", cmd_weights, "turn uncertainty maps into weight-mask PNGs")
    p.add_argument("--uncertainty", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--masks", type=Path, help="also write mask+weight combined PNGs")

    p = add("loss", cmd_loss, "weighted cross-entropy of score maps against masks")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--weights", type=Path)
    p.add_argument("--report", type=Path)

    p = add("distill", cmd_distill, "relabel images with a teacher model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--crf", action="store_true", help="refine teacher output before the argmax")
    _add_crf_flags(p)

    p = add("eval", cmd_eval, "mIoU of predicted masks and/or noise AUROC of uncertainty maps")
    p.add_argument("--pred", type=Path)
    p.add_argument("--gt", type=Path)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--uncertainty", type=Path)
    p.add_argument("--noise", type=Path)
    p.add_argument("--report", type=Path)

    r = RunConfig()
    p = add("urn", cmd_urn, "full loop: train, estimate uncertainty, reweight, retrain, evaluate")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scales", default=r.scales)
    p.add_argument("--threshold", type=float, default=r.threshold)
    p.add_argument("--variance-mode", choices=("indicator", "raw_label"), default=r.variance_mode)
    p.add_argument("--no-crf", action="store_true")
    p.add_argument("--holdout", type=float, default=r.holdout)
    p.add_argument("--no-probability-baseline", action="store_true")
    _add_train_flags(p)
    _add_crf_flags(p)

    p = add("viz", cmd_viz, "render uncertainty maps as heatmaps")
    p.add_argument("--uncertainty", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Load ``--config`` and install its values as the subcommand's defaults."""
    pre = _Parser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None or known.command is None:
        return
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices.get(known.command)
    if sub is None:
        return
    actions = {a.dest: a for a in sub._actions}
    overrides = {}
    for key, value in read_manifest(known.config).items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help", "func"):
            raise UsageError(f"{known.config}: unknown setting {key!r} for '{known.command}'")
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{known.config}: {key} must be true or false, got {value!r}")
            overrides[dest] = low in ("true", "1", "yes")
        else:
            # string defaults go through the action's type conversion at parse time
            overrides[dest] = value
            action.required = False
    sub.set_defaults(**overrides)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.threads is None:
            args.threads = default_threads()
        if args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        args.func(args)
    except (OSError, EOFError) as exc:
        print(f"urn: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"urn: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
