"""File formats for score maps, masks, weight masks and heatmaps.

* Score and gray maps: NPY version 1.0, restricted to little-endian
  float32/float64 and uint8/uint16, C order.  A score map's kind (logits or
  probabilities) lives in a one-line sidecar file ``<path>.meta``.
* Label masks: 8-bit indexed PNG with the VOC color palette; the pixel
  index is the class label and 255 marks ignored pixels.
* Weight masks: 8-bit grayscale PNG storing ``floor(255 * v + 0.5)``;
  reading divides by 255.
* Combined masks: one 8-bit grayscale PNG of width 2W with the label mask
  on the left and the quantized weight mask on the right.
* Heatmaps: RGB PNG through :data:`COLORMAP`.

Every malformed input raises a subclass of :class:`StorageError`.
"""

from __future__ import annotations

import ast
import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import (
    IGNORE_INDEX,
    ValidationError,
    check_gray_map,
    check_kind,
    check_label_mask,
    check_same_hw,
    check_score_map,
)

NPY_MAGIC = b"\x93NUMPY"
NPY_ALIGN = 64
META_SUFFIX = ".meta"

_DESCR_TO_DTYPE = {
    "<f8": np.dtype("<f8"),
    "<f4": np.dtype("<f4"),
    "|u1": np.dtype("u1"),
    "<u2": np.dtype("<u2"),
}
_KIND_TO_DESCR = {("f", 8): "<f8", ("f", 4): "<f4", ("u", 1): "|u1", ("u", 2): "<u2"}


class StorageError(OSError):
    """Base class for malformed or unsupported files."""


class BadMagicError(StorageError):
    """The file does not start with the expected magic bytes."""


class BadHeaderError(StorageError):
    """The NPY header is malformed or has an unsupported version."""


class ShapeMismatchError(StorageError):
    """The payload size disagrees with the shape in the header."""


class UnsupportedDtypeError(StorageError):
    """The array dtype is outside the supported set."""


class UnsupportedOrderError(StorageError):
    """The array is stored in Fortran order."""


class MissingMetadataError(StorageError):
    """A score map has no usable kind sidecar."""


class NotIndexedPNGError(StorageError):
    """A mask PNG is not an 8-bit palette image."""


class PNGFormatError(StorageError):
    """A PNG cannot be decoded or has the wrong mode."""


# -- NPY ---------------------------------------------------------------------


def _npy_header(descr: str, shape: tuple[int, ...]) -> bytes:
    shape_repr = repr(tuple(int(d) for d in shape))
    text = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_repr}, }}"
    # pad with spaces so magic + version + length + header is 64-aligned,
    # ending in a newline
    base = len(NPY_MAGIC) + 2 + 2
    pad = -(base + len(text) + 1) % NPY_ALIGN
    text = text + " " * pad + "\n"
    if len(text) > 0xFFFF:
        raise UnsupportedDtypeError("array header too long for NPY version 1.0")
    return NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(text)) + text.encode("latin1")


def write_npy(path, arr) -> None:
    """Write a C-ordered NPY 1.0 file; dtype must be f4, f8, u1 or u2."""
    arr = np.asarray(arr)
    descr = _KIND_TO_DESCR.get((arr.dtype.kind, arr.dtype.itemsize))
    if descr is None:
        raise UnsupportedDtypeError(f"unsupported dtype {arr.dtype}; expected float32/64 or uint8/16")
    data = np.asarray(arr, dtype=_DESCR_TO_DTYPE[descr])
    Path(path).write_bytes(_npy_header(descr, data.shape) + data.tobytes(order="C"))


def read_npy(path) -> np.ndarray:
    """Read an NPY 1.0 file written by :func:`write_npy` or any compatible writer."""
    raw = Path(path).read_bytes()
    if raw[:6] != NPY_MAGIC:
        raise BadMagicError(f"{path}: not an NPY file (bad magic)")
    if len(raw) < 10:
        raise BadHeaderError(f"{path}: truncated NPY header")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise BadHeaderError(f"{path}: unsupported NPY version {major}.{minor}")
    (hlen,) = struct.unpack("<H", raw[8:10])
    if len(raw) < 10 + hlen:
        raise BadHeaderError(f"{path}: truncated NPY header")
    try:
        header = ast.literal_eval(raw[10:10 + hlen].decode("latin1"))
    except (SyntaxError, ValueError, UnicodeDecodeError):
        raise BadHeaderError(f"{path}: malformed NPY header") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise BadHeaderError(f"{path}: NPY header must hold descr, fortran_order and shape")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(
        isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
    ):
        raise BadHeaderError(f"{path}: malformed shape {shape!r}")
    if not isinstance(header["fortran_order"], bool):
        raise BadHeaderError(f"{path}: malformed fortran_order")
    descr = header["descr"]
    if not isinstance(descr, str) or descr not in _DESCR_TO_DTYPE:
        raise UnsupportedDtypeError(f"{path}: unsupported dtype {descr!r}")
    if header["fortran_order"]:
        raise UnsupportedOrderError(f"{path}: unsupported order (Fortran)")
    dtype = _DESCR_TO_DTYPE[descr]
    payload = raw[10 + hlen:]
    expected = math.prod(shape) * dtype.itemsize
    if len(payload) != expected:
        raise ShapeMismatchError(
            f"{path}: shape {shape} needs {expected} payload bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_score_map(path, x, kind: str) -> None:
    """Write a (C, H, W) score map as float64 NPY plus its kind sidecar."""
    check_kind(kind)
    x = check_score_map(x, kind=kind)
    write_npy(path, x)
    Path(str(path) + META_SUFFIX).write_text(f"kind={kind}\n")


def read_score_map(path, kind: str | None = None) -> tuple[np.ndarray, str]:
    """Read a score map and its kind.

    The kind comes from the sidecar.  Without a sidecar, ``kind`` must be
    given explicitly; a sidecar that disagrees with ``kind`` is an error.
    """
    meta = Path(str(path) + META_SUFFIX)
    found = None
    if meta.exists():
        lines = [ln.strip() for ln in meta.read_text().splitlines() if ln.strip()]
        if len(lines) != 1 or not lines[0].startswith("kind="):
            raise MissingMetadataError(f"{meta}: expected a single 'kind=...' line")
        found = lines[0][len("kind="):].strip()
        try:
            check_kind(found)
        except ValidationError:
            raise MissingMetadataError(f"{meta}: unknown kind {found!r}") from None
    if found is None and kind is None:
        raise MissingMetadataError(f"{path}: no kind sidecar and no kind given")
    if found is not None and kind is not None and found != kind:
        raise MissingMetadataError(f"{path}: sidecar says {found!r} but {kind!r} was requested")
    kind = found or kind
    x = read_npy(path)
    if x.ndim != 3:
        raise ShapeMismatchError(f"{path}: expected a (C, H, W) score map, found shape {x.shape}")
    return check_score_map(x.astype(np.float64), kind=kind, name=str(path)), kind


def write_gray_map(path, g) -> None:
    """Write an (H, W) real map, such as an uncertainty map, as float64 NPY."""
    write_npy(path, check_gray_map(g, unit_interval=False))


def read_gray_map(path) -> np.ndarray:
    g = read_npy(path)
    if g.ndim != 2:
        raise ShapeMismatchError(f"{path}: expected an (H, W) map, found shape {g.shape}")
    return g.astype(np.float64)


# -- PNG ---------------------------------------------------------------------


def voc_palette() -> np.ndarray:
    """The standard 256-entry VOC palette as a (256, 3) uint8 array.

    Entry ``i`` spreads the bits of ``i`` over the three channels, high bit
    first, so that 0 is black, 1 dark red, 2 dark green and 255 is
    (224, 224, 192).
    """
    pal = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


_PALETTE_BYTES = voc_palette().tobytes()


def _open_png(path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise PNGFormatError(f"{path}: cannot decode image ({exc})") from None
    if im.format != "PNG":
        raise PNGFormatError(f"{path}: expected PNG, found {im.format}")
    return im


def write_mask_png(path, m) -> None:
    """Write a label mask as an indexed PNG with the VOC palette."""
    m = check_label_mask(m, num_classes=256)
    im = Image.fromarray(m.astype(np.uint8), mode="P")
    im.putpalette(_PALETTE_BYTES)
    im.save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    """Read an indexed PNG mask; pixel indices are the labels."""
    im = _open_png(path)
    if im.mode != "P":
        raise NotIndexedPNGError(f"{path}: expected an indexed (palette) PNG, found mode {im.mode}")
    return np.asarray(im, dtype=np.uint8).astype(np.int64)


def is_all_ignore(m, ignore_index: int = IGNORE_INDEX) -> bool:
    """True when every pixel of the mask carries the ignore label."""
    return bool(np.all(np.asarray(m) == ignore_index))


def quantize_weights(y) -> np.ndarray:
    """Map values in [0, 1] to 8-bit levels, rounding halves up."""
    y = check_gray_map(y, name="weight mask")
    return np.floor(255.0 * y + 0.5).astype(np.uint8)


def write_weight_png(path, y) -> None:
    """Write a weight mask as an 8-bit grayscale PNG."""
    Image.fromarray(quantize_weights(y), mode="L").save(path, format="PNG")


def _read_gray_png(path) -> np.ndarray:
    im = _open_png(path)
    if im.mode != "L":
        raise PNGFormatError(f"{path}: expected an 8-bit grayscale PNG, found mode {im.mode}")
    return np.asarray(im, dtype=np.uint8)


def read_weight_png(path) -> np.ndarray:
    """Read a weight mask; stored levels are divided by 255."""
    return _read_gray_png(path).astype(np.float64) / 255.0


def write_combined(path, m, y) -> None:
    """Write mask (left) and quantized weights (right) side by side in one PNG."""
    m = check_label_mask(m, num_classes=256)
    q = quantize_weights(y)
    check_same_hw(m.shape, q.shape, "mask", "weight mask")
    Image.fromarray(np.concatenate([m.astype(np.uint8), q], axis=1), mode="L").save(path, format="PNG")


def read_combined(path) -> tuple[np.ndarray, np.ndarray]:
    """Split a combined PNG back into (mask, weights)."""
    both = _read_gray_png(path)
    if both.shape[1] % 2:
        raise ShapeMismatchError(f"{path}: combined image width {both.shape[1]} is odd")
    w = both.shape[1] // 2
    return both[:, :w].astype(np.int64), both[:, w:].astype(np.float64) / 255.0


def write_rgb_png(path, img) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_rgb_png(path) -> np.ndarray:
    im = _open_png(path)
    if im.mode != "RGB":
        raise PNGFormatError(f"{path}: expected an RGB PNG, found mode {im.mode}")
    return np.asarray(im, dtype=np.uint8).copy()


# -- heatmaps ----------------------------------------------------------------

# Anchors of the piecewise-linear colormap, as (position, RGB).
COLORMAP_ANCHORS = (
    (0.0, (0, 0, 255)),
    (1.0 / 3.0, (0, 255, 255)),
    (2.0 / 3.0, (255, 255, 0)),
    (1.0, (255, 0, 0)),
)


def _build_colormap() -> np.ndarray:
    pos = np.array([a[0] for a in COLORMAP_ANCHORS])
    rgb = np.array([a[1] for a in COLORMAP_ANCHORS], dtype=np.float64)
    t = np.arange(256) / 255.0
    table = np.stack([np.interp(t, pos, rgb[:, k]) for k in range(3)], axis=1)
    return np.floor(table + 0.5).astype(np.uint8)


#: 256 x 3 table from blue (0) through cyan and yellow to red (255).
COLORMAP = _build_colormap()
COLORMAP.flags.writeable = False


def render_heatmap(u) -> np.ndarray:
    """Color an [0, 1] map through :data:`COLORMAP` at level ``floor(255 v + 0.5)``."""
    return COLORMAP[quantize_weights(u)]


def write_heatmap(path, u) -> None:
    write_rgb_png(path, render_heatmap(u))
