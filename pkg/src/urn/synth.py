"""Synthetic segmentation datasets with controlled mask noise.

Images show a smooth gray background texture with colored geometric
shapes.  Each foreground class has its own shape (rectangle, circle,
triangle, repeating for more classes) and base color.  Shapes lie fully
inside the image and later shapes occlude earlier ones.

Noise imitates the two failure modes of pseudo-masks: dilation grows an
object over the background (false positives) and erosion shrinks it back
into the background (missing positives).  Objects are the connected
components of each foreground class under 8-connectivity, and both
operations use a square structuring element.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import BACKGROUND, ValidationError, check_label_mask
from .storage import (
    read_mask_png,
    read_rgb_png,
    read_weight_png,
    write_mask_png,
    write_rgb_png,
    write_weight_png,
)

SHAPE_KINDS = ("rect", "circle", "triangle")
NOISE_MODES = ("dilate", "erode", "mixed")
MANIFEST_NAME = "manifest.txt"
SUBDIRS = ("images", "gt", "noisy", "noise")

_BASE_COLORS = np.array(
    [[205, 50, 45], [40, 170, 60], [50, 80, 215], [215, 190, 30], [150, 40, 170], [30, 180, 190]],
    dtype=np.float64,
)
_BACKGROUND_GRAY = 120.0


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


@dataclass(frozen=True)
class SynthConfig:
    """Dataset generation settings.

    ``n_classes`` counts background plus ``n_shape_classes``.  Shape sizes
    are radii (half extents) drawn uniformly from the integer range
    ``size_range``; shape counts come from ``shapes_per_image`` the same
    way.  ``blur_sigma`` softens the rendered edges with a Gaussian blur;
    the masks stay exact.
    """

    n_images: int = 50
    height: int = 64
    width: int = 64
    n_shape_classes: int = 3
    shapes_per_image: tuple[int, int] = (2, 6)
    size_range: tuple[int, int] = (6, 14)
    color_jitter: float = 12.0
    texture_amplitude: float = 20.0
    blur_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_images", "height", "width", "n_shape_classes", "seed"):
            if not _is_int(getattr(self, name)):
                raise ValidationError(f"{name} must be an integer, got {getattr(self, name)!r}")
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        object.__setattr__(self, "size_range", tuple(int(v) for v in self.size_range))
        if self.n_images < 0 or self.seed < 0:
            raise ValidationError("n_images and seed must be non-negative")
        if self.n_shape_classes < 1 or self.n_shape_classes > 254:
            raise ValidationError(f"n_shape_classes must lie in [1, 254], got {self.n_shape_classes}")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise ValidationError(f"invalid shapes_per_image range {self.shapes_per_image}")
        rmin, rmax = self.size_range
        if not 1 <= rmin <= rmax:
            raise ValidationError(f"invalid size_range {self.size_range}")
        if 2 * rmax + 1 > min(self.height, self.width):
            raise ValidationError(
                f"shapes of radius {rmax} do not fit in a {self.height}x{self.width} image"
            )
        if self.color_jitter < 0 or self.texture_amplitude < 0 or self.blur_sigma < 0:
            raise ValidationError("color_jitter, texture_amplitude and blur_sigma must be >= 0")

    @property
    def n_classes(self) -> int:
        return self.n_shape_classes + 1


@dataclass(frozen=True)
class NoiseSpec:
    """Which objects to perturb, how, and by how many pixels."""

    mode: str = "mixed"
    radius: int = 2
    fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValidationError(f"mode must be one of {NOISE_MODES}, got {self.mode!r}")
        if not _is_int(self.radius) or self.radius < 1:
            raise ValidationError(f"radius must be an integer >= 1, got {self.radius!r}")
        if not 0.0 <= float(self.fraction) <= 1.0:
            raise ValidationError(f"fraction must lie in [0, 1], got {self.fraction}")
        if not _is_int(self.seed) or self.seed < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        object.__setattr__(self, "fraction", float(self.fraction))


def shape_kind(label: int) -> str:
    """Shape drawn for foreground class ``label``."""
    return SHAPE_KINDS[(label - 1) % len(SHAPE_KINDS)]


def class_color(label: int) -> np.ndarray:
    return _BASE_COLORS[(label - 1) % len(_BASE_COLORS)]


def shape_mask(kind: str, shape: tuple[int, int], center: tuple[int, int], radius) -> np.ndarray:
    """Boolean raster of one shape.

    ``radius`` is an int, or a pair of half extents for rectangles.  The
    triangle points up: row ``cy - r + j`` spans columns ``cx +- j // 2``.
    """
    h, w = shape
    cy, cx = center
    yy, xx = np.ogrid[:h, :w]
    if kind == "rect":
        a, b = radius if isinstance(radius, tuple) else (radius, radius)
        return (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    if kind == "triangle":
        j = yy - (cy - radius)
        return (j >= 0) & (j <= 2 * radius) & (2 * np.abs(xx - cx) <= j - j % 2)
    raise ValidationError(f"unknown shape kind {kind!r}")


def shape_area(kind: str, radius) -> int:
    """Pixel count of a shape lying fully inside the image, by counting formula."""
    if kind == "rect":
        a, b = radius if isinstance(radius, tuple) else (radius, radius)
        return (2 * a + 1) * (2 * b + 1)
    if kind == "circle":
        return sum(2 * math.isqrt(radius * radius - d * d) + 1 for d in range(-radius, radius + 1))
    if kind == "triangle":
        return sum(2 * (j // 2) + 1 for j in range(2 * radius + 1))
    raise ValidationError(f"unknown shape kind {kind!r}")


def expected_class_frequency(cfg: SynthConfig) -> np.ndarray:
    """Expected share of pixels per class.

    Classes are drawn uniformly for every shape, so with ``n`` shapes class
    ``k`` receives ``n / K`` shapes of mean area ``E[area_k]``.  Occlusion
    is modelled by letting every later shape cover a given pixel with
    probability ``q = E[area] / (H * W)``, independently, which makes the
    visible share of ``n`` shapes ``(1 - (1 - q)^n) / (n q)``.  Counts ``n``
    are uniform over ``shapes_per_image``.
    """
    hw = cfg.height * cfg.width
    sizes = range(cfg.size_range[0], cfg.size_range[1] + 1)
    mean_area = np.zeros(cfg.n_classes)
    for k in range(1, cfg.n_classes):
        kind = shape_kind(k)
        if kind == "rect":
            mean_area[k] = np.mean([shape_area(kind, (a, b)) for a in sizes for b in sizes])
        else:
            mean_area[k] = np.mean([shape_area(kind, r) for r in sizes])
    q = mean_area[1:].mean() / hw
    counts = np.arange(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1)
    # expected number of shapes times their visible share, averaged over counts
    visible = np.mean([1.0 - (1.0 - q) ** n for n in counts]) / q
    freq = visible / cfg.n_shape_classes * mean_area / hw
    freq[BACKGROUND] = 1.0 - freq[1:].sum()
    return freq


def _texture(rng: np.random.Generator, h: int, w: int, amplitude: float) -> np.ndarray:
    # low-resolution noise upsampled with cubic splines gives a smooth texture
    coarse = rng.uniform(-1.0, 1.0, size=(h // 8 + 2, w // 8 + 2))
    fine = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1]), order=3)[:h, :w]
    return _BACKGROUND_GRAY + amplitude * fine


def generate_one(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Image ``index`` of the dataset; depends only on ``(cfg.seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    rgb = np.repeat(_texture(rng, h, w, cfg.texture_amplitude)[:, :, None], 3, axis=2)
    gt = np.zeros((h, w), dtype=np.int64)
    n_shapes = int(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1))
    rmin, rmax = cfg.size_range
    for _ in range(n_shapes):
        label = int(rng.integers(1, cfg.n_classes))
        kind = shape_kind(label)
        if kind == "rect":
            radius = (int(rng.integers(rmin, rmax + 1)), int(rng.integers(rmin, rmax + 1)))
            ry, rx = radius
        else:
            radius = int(rng.integers(rmin, rmax + 1))
            ry = rx = radius
        center = (int(rng.integers(ry, h - ry)), int(rng.integers(rx, w - rx)))
        inside = shape_mask(kind, (h, w), center, radius)
        color = class_color(label) + rng.normal(0.0, cfg.color_jitter, size=3)
        rgb[inside] = color
        gt[inside] = label
    if cfg.blur_sigma > 0:
        # soft edges, as from camera optics; the ground truth stays exact
        rgb = ndimage.gaussian_filter(rgb, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0), mode="nearest")
    rgb += rng.normal(0.0, cfg.color_jitter / 4.0, size=rgb.shape)
    img = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)
    return img, gt


def generate(cfg: SynthConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Images and exact ground-truth masks, ``cfg.n_images`` of them."""
    return [generate_one(cfg, i) for i in range(cfg.n_images)]


def objects(gt) -> list[tuple[int, np.ndarray]]:
    """Foreground objects as ``(label, boolean mask)``, ordered by label then
    by component number."""
    gt = check_label_mask(gt, name="ground truth")
    found = []
    structure = np.ones((3, 3), dtype=bool)
    for label in np.unique(gt):
        if label == BACKGROUND or label >= 255:
            continue
        comp, n = ndimage.label(gt == label, structure=structure)
        found.extend((int(label), comp == i) for i in range(1, n + 1))
    return found


def inject_noise(gt, spec: NoiseSpec) -> tuple[np.ndarray, np.ndarray]:
    """Perturb a random share of the objects in a ground-truth mask.

    Every object is selected with probability ``spec.fraction``.  In mixed
    mode each selected object is then dilated or eroded with equal odds.
    Dilation claims only pixels that are background in ``gt`` (the first
    object to claim a pixel keeps it); erosion returns pixels to the
    background.  An object may erode away completely.

    Returns
    -------
    noisy : ndarray of shape (H, W)
    indicator : ndarray of shape (H, W)
        1.0 where ``noisy != gt``, else 0.0.
    """
    gt = check_label_mask(gt, name="ground truth")
    rng = np.random.default_rng(spec.seed)
    selem = np.ones((2 * spec.radius + 1,) * 2, dtype=bool)
    noisy = gt.copy()
    claimed = gt != BACKGROUND
    for label, obj in objects(gt):
        # both draws happen for every object so the stream does not depend on the mode
        picked = rng.random() < spec.fraction
        grow = rng.random() < 0.5 if spec.mode == "mixed" else spec.mode == "dilate"
        if not picked:
            continue
        if grow:
            ring = ndimage.binary_dilation(obj, structure=selem) & ~claimed
            noisy[ring] = label
            claimed |= ring
        else:
            lost = obj & ~ndimage.binary_erosion(obj, structure=selem)
            noisy[lost] = BACKGROUND
    return noisy, (noisy != gt).astype(np.float64)


def noise_seed(spec: NoiseSpec, index: int) -> int:
    """Seed of the noise applied to image ``index`` of a dataset."""
    return int(np.random.SeedSequence([spec.seed, index]).generate_state(1)[0])


# -- dataset directories ----------------------------------------------------


def _manifest_lines(cfg: SynthConfig, spec: NoiseSpec) -> list[str]:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    for key, value in asdict(spec).items():
        lines.append(f"noise_{key} = {value}")
    for i in range(cfg.n_images):
        lines.append(f"image_seed.{i:04d} = {cfg.seed},{i}")
        lines.append(f"noise_seed.{i:04d} = {noise_seed(spec, i)}")
    return lines


def write_dataset(root, cfg: SynthConfig, spec: NoiseSpec) -> Path:
    """Generate a dataset with noisy masks and write it under ``root``.

    Layout: ``images/NNNN.png`` (RGB), ``gt/NNNN.png`` and
    ``noisy/NNNN.png`` (indexed masks), ``noise/NNNN.png`` (indicator as a
    0/255 grayscale PNG) and ``manifest.txt`` with ``key = value`` lines.
    """
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(cfg.n_images):
        img, gt = generate_one(cfg, i)
        noisy, indicator = inject_noise(gt, NoiseSpec(spec.mode, spec.radius, spec.fraction, noise_seed(spec, i)))
        name = f"{i:04d}.png"
        write_rgb_png(root / "images" / name, img)
        write_mask_png(root / "gt" / name, gt)
        write_mask_png(root / "noisy" / name, noisy)
        write_weight_png(root / "noise" / name, indicator)
    (root / MANIFEST_NAME).write_text("\n".join(_manifest_lines(cfg, spec)) + "\n")
    return root


def read_manifest(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    entries = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{n}: expected 'key = value', found {raw!r}")
        entries[key.strip()] = value.strip()
    return entries


@dataclass
class SynthDataset:
    """In-memory view of a dataset directory."""

    images: list[np.ndarray]
    gt: list[np.ndarray]
    noisy: list[np.ndarray]
    noise: list[np.ndarray]
    manifest: dict[str, str]

    @property
    def n_classes(self) -> int:
        return int(self.manifest["n_shape_classes"]) + 1

    def __len__(self) -> int:
        return len(self.images)


def read_dataset(root) -> SynthDataset:
    """Load every image and mask listed by the manifest under ``root``."""
    root = Path(root)
    manifest = read_manifest(root / MANIFEST_NAME)
    n = int(manifest["n_images"])
    names = [f"{i:04d}.png" for i in range(n)]
    return SynthDataset(
        images=[read_rgb_png(root / "images" / s) for s in names],
        gt=[read_mask_png(root / "gt" / s) for s in names],
        noisy=[read_mask_png(root / "noisy" / s) for s in names],
        noise=[read_weight_png(root / "noise" / s) for s in names],
        manifest=manifest,
    )


def make_separable(n_images: int = 4, size: int = 32, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Two-class dataset whose classes differ only by color.

    Background pixels are dark blue and foreground pixels bright orange,
    each with small noise, so a linear model on the color features alone
    separates them.  Foreground is one axis-aligned rectangle per image.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_images):
        gt = np.zeros((size, size), dtype=np.int64)
        y0, x0 = rng.integers(0, size // 2, size=2)
        y1, x1 = rng.integers(size // 2 + 1, size + 1, size=2)
        gt[y0:y1, x0:x1] = 1
        colors = np.where(gt[:, :, None] == 1, [[[230, 140, 40]]], [[[30, 40, 120]]])
        img = np.clip(colors + rng.normal(0, 8, size=colors.shape), 0, 255).astype(np.uint8)
        out.append((img, gt))
    return out
