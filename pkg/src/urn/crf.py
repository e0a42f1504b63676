"""Fully-connected CRF with Gaussian pairwise kernels, solved by mean field.

Two kernels act on every pixel pair:

* spatial, ``exp(-|p_i - p_j|^2 / 2 theta_gamma^2)`` with weight ``w_s``;
* bilateral, ``exp(-|p_i - p_j|^2 / 2 theta_alpha^2 - |I_i - I_j|^2 / 2 theta_beta^2)``
  with weight ``w_b``.

Each kernel matrix K is used in its symmetrically normalised form
``D^-1/2 K D^-1/2`` with ``D = diag(K 1)``, the pair sum running over all j
including i.  Compatibility is Potts, so one mean-field step is::

    Q <- softmax(-U + w_s * Ks~ Q + w_b * Kb~ Q)

with unary ``U = -log(max(p, 1e-8))``.

``refine_naive`` sums every pair exactly and is limited to small images.
``refine_fast`` filters the spatial kernel with a separable banded product
(exact up to a 6-stddev truncation) and
approximates the bilateral kernel with a permutohedral lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import partial
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator

from ._permutohedral import PermutohedralLattice
from ._validation import ValidationError, check_rgb_image, check_same_hw, check_score_map

UNARY_FLOOR = 1e-8
NAIVE_MAX_PIXELS = 4096
SPATIAL_TRUNCATE = 6.0
_BLOCK = 32

IterationCallback = Callable[[int, np.ndarray], None]


@dataclass(frozen=True)
class CrfParams:
    """Mean-field iteration count and Gaussian kernel parameters.

    Stddevs are in pixels (spatial) and 8-bit color units (color).  Weights
    may be 0, which switches the kernel off.
    """

    iterations: int = 10
    spatial_weight: float = 3.0
    spatial_stddev: float = 3.0
    bilateral_weight: float = 4.0
    bilateral_spatial_stddev: float = 49.0
    bilateral_color_stddev: float = 5.0

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ValidationError(f"iterations must be a non-negative integer, got {self.iterations}")
        for f in fields(self):
            if f.name == "iterations":
                continue
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValidationError(f"{f.name} must be finite, got {v}")
            if f.name.endswith("weight") and v < 0:
                raise ValidationError(f"{f.name} must be >= 0, got {v}")
            if f.name.endswith("stddev") and v <= 0:
                raise ValidationError(f"{f.name} must be > 0, got {v}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_inputs(p, img, batched: bool) -> tuple[np.ndarray, np.ndarray]:
    img = check_rgb_image(img)
    p = np.asarray(p)
    if batched:
        if p.ndim != 4:
            raise ValidationError(f"probability batch must have shape (B, C, H, W), got {p.shape}")
        p = np.stack([check_score_map(q, kind="probabilities", name="probabilities") for q in p])
    else:
        p = check_score_map(p, kind="probabilities", name="probabilities")[None]
    check_same_hw(p.shape[2:], img.shape[:2], "probabilities", "image")
    return p, img


def _bilateral_features(img: np.ndarray, params: CrfParams) -> np.ndarray:
    h, w = img.shape[:2]
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1) / params.bilateral_spatial_stddev
    col = img.reshape(-1, 3).astype(np.float64) / params.bilateral_color_stddev
    return np.concatenate([pos, col], axis=1)


def _spatial_features(shape, params: CrfParams) -> np.ndarray:
    h, w = shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1) / params.spatial_stddev


class _KernelOperator:
    """Weighted normalised message ``v -> w D^-1/2 K D^-1/2 v`` for one kernel.

    ``raw`` applies the unnormalised kernel to an (N, k) array.
    """

    def __init__(
        self, raw: Callable[[np.ndarray], np.ndarray], n: int, weight: float, dtype=np.float64
    ):
        self._raw = raw
        deg = raw(np.ones((n, 1), dtype=dtype))[:, 0].astype(np.float64)
        inv_sqrt = 1.0 / np.sqrt(deg)
        # any constant gain of raw cancels between the two scalings
        self._in_scale = inv_sqrt[:, None].astype(dtype)
        self._out_scale = (weight * inv_sqrt)[:, None]

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self._raw(self._in_scale * values) * self._out_scale


def _dense_raw(features: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    k = cdist(features, features, metric="sqeuclidean")
    k *= -0.5
    np.exp(k, out=k)
    return lambda v: k @ v


def _banded_blocks(size: int, stddev: float):
    # Row blocks of the 1-D Gaussian matrix, each restricted to the columns
    # within the truncation radius of the block.  Taps beyond the radius
    # that fall inside a block are kept, so the truncation error is bounded
    # by the tail beyond SPATIAL_TRUNCATE stddevs.
    r = int(math.ceil(SPATIAL_TRUNCATE * stddev))
    idx = np.arange(size, dtype=np.float64)
    blocks = []
    for a in range(0, size, _BLOCK):
        b = min(size, a + _BLOCK)
        lo, hi = max(0, a - r), min(size, b + r)
        t = np.exp(-0.5 * ((idx[a:b, None] - idx[None, lo:hi]) / stddev) ** 2)
        blocks.append((a, b, lo, hi, t))
    return blocks


def _separable_raw(shape, stddev: float, dtype=np.float64) -> Callable[[np.ndarray], np.ndarray]:
    h, w = shape
    rows = [(a, b, lo, hi, t.astype(dtype)) for a, b, lo, hi, t in _banded_blocks(h, stddev)]
    cols = [(a, b, lo, hi, t.astype(dtype)) for a, b, lo, hi, t in _banded_blocks(w, stddev)]

    def apply(v):
        k = v.shape[1]
        grid = v.astype(dtype, copy=False).reshape(h, w, k)
        tmp = np.empty_like(grid)
        for a, b, lo, hi, t in rows:
            tmp[a:b] = np.tensordot(t, grid[lo:hi], axes=(1, 0))
        out = np.empty_like(grid)
        for a, b, lo, hi, t in cols:
            out[:, a:b] = np.matmul(t, tmp[:, lo:hi])
        return out.reshape(v.shape)

    return apply


def _mean_field(
    p: np.ndarray,
    operators: list[_KernelOperator],
    iterations: int,
    callback: IterationCallback | None,
) -> np.ndarray:
    b, c, h, w = p.shape
    n = h * w
    # state is kept as (N, B, C) so messages for all B*C channels are one
    # contiguous (N, B*C) block and the softmax runs over the last axis
    clamped = np.maximum(np.ascontiguousarray(p.reshape(b, c, n).transpose(2, 0, 1)), UNARY_FLOOR)
    neg_unary = np.log(clamped)
    # softmax(-U) is exactly the renormalised clamped input
    q = clamped / clamped.sum(axis=2, keepdims=True)

    def emit(it):
        if callback is not None:
            callback(it, q.transpose(1, 2, 0).reshape(b, c, h, w))

    emit(0)
    for it in range(1, iterations + 1):
        vals = q.reshape(n, b * c)
        energy = neg_unary.copy() if not operators else None
        for op in operators:
            msg = op(vals).reshape(n, b, c)
            if energy is None:
                energy = msg
                energy += neg_unary
            else:
                energy += msg
        energy -= energy.max(axis=2, keepdims=True)
        np.exp(energy, out=energy)
        energy /= energy.sum(axis=2, keepdims=True)
        q = energy
        emit(it)
    return np.ascontiguousarray(q.transpose(1, 2, 0)).reshape(b, c, h, w)


def _operators(img: np.ndarray, params: CrfParams, method: str) -> list[_KernelOperator]:
    shape = img.shape[:2]
    n = shape[0] * shape[1]
    ops = []
    if params.spatial_weight > 0:
        if method == "naive":
            raw = _dense_raw(_spatial_features(shape, params))
        else:
            raw = _separable_raw(shape, params.spatial_stddev)
        ops.append(_KernelOperator(raw, n, params.spatial_weight))
    if params.bilateral_weight > 0:
        feats = _bilateral_features(img, params)
        if method == "naive":
            ops.append(_KernelOperator(_dense_raw(feats), n, params.bilateral_weight))
        else:
            # single precision halves the lattice's memory traffic; energies
            # and marginals stay in double precision
            lattice = PermutohedralLattice(feats, dtype=np.float32)
            ops.append(_KernelOperator(
                partial(lattice.filter, normalize=False), n,
                params.bilateral_weight, dtype=np.float32))
    return ops


def _check_method(method: str) -> None:
    if method not in ("fast", "naive"):
        raise ValidationError(f"method must be 'fast' or 'naive', got {method!r}")


class ImageRefiner:
    """Mean-field solver with the kernels of one image built once.

    Calling the refiner on a (B, C, H, W) stack of probability maps runs
    every map's messages through the shared kernels in one pass.
    """

    def __init__(self, img, params: CrfParams | None = None, method: str = "fast",
                 max_pixels: int | None = NAIVE_MAX_PIXELS):
        _check_method(method)
        self.params = CrfParams() if params is None else params
        self.img = check_rgb_image(img)
        self.method = method
        n = self.img.shape[0] * self.img.shape[1]
        if method == "naive" and max_pixels is not None and n > max_pixels:
            raise ValidationError(
                f"image has {n} pixels, above the naive-path cap of {max_pixels}; use refine_fast"
            )
        self._ops = _operators(self.img, self.params, method) if self.params.iterations > 0 else []

    def __call__(self, p, callback: IterationCallback | None = None) -> np.ndarray:
        p, _ = _check_inputs(p, self.img, batched=True)
        return _mean_field(p, self._ops, self.params.iterations, callback)


def _refine(p, img, params, method, batched, callback, max_pixels=None):
    p, img = _check_inputs(p, img, batched)
    refiner = ImageRefiner(img, params, method, max_pixels)
    out = _mean_field(p, refiner._ops, refiner.params.iterations, callback)
    return out if batched else out[0]


def refine_naive(
    p,
    img,
    params: CrfParams | None = None,
    *,
    max_pixels: int = NAIVE_MAX_PIXELS,
    callback: IterationCallback | None = None,
) -> np.ndarray:
    """Mean-field refinement with exact O(N^2) message passing.

    Parameters
    ----------
    p : ndarray of shape (C, H, W)
        Probability map.
    img : ndarray of shape (H, W, 3), uint8
        Image driving the bilateral kernel.
    params : CrfParams, optional
    max_pixels : int
        Images with more pixels are rejected; use :func:`refine_fast`.
    callback : callable, optional
        Called as ``callback(iteration, q)`` with the marginals after the
        initialisation (iteration 0) and after every update.

    Returns
    -------
    ndarray of shape (C, H, W)
        Refined marginals.
    """
    return _refine(p, img, params, "naive", False, callback, max_pixels)


def refine_fast(
    p,
    img,
    params: CrfParams | None = None,
    *,
    callback: IterationCallback | None = None,
) -> np.ndarray:
    """Mean-field refinement with filtered message passing.

    Same update as :func:`refine_naive`.  The spatial kernel is applied
    with a separable banded matrix product (exact up to a 6-stddev
    truncation); the bilateral kernel is approximated with a
    permutohedral lattice.
    """
    return _refine(p, img, params, "fast", False, callback)


def refine_batch(
    p,
    img,
    params: CrfParams | None = None,
    *,
    method: str = "fast",
    callback: IterationCallback | None = None,
) -> np.ndarray:
    """Refine a (B, C, H, W) stack of probability maps that share one image.

    The kernels are built once and every map's messages are filtered in a
    single pass, which is much cheaper than B separate calls.
    """
    _check_method(method)
    return _refine(p, img, params, method, True, callback, NAIVE_MAX_PIXELS)


class DenseCRF(BaseEstimator):
    """Estimator-style wrapper around :func:`refine_fast` / :func:`refine_naive`.

    The CRF has no trainable state, so ``fit`` only validates the
    parameters.  Use :meth:`refine` on one map or :meth:`refine_batch` on a
    stack of maps sharing an image.
    """

    def __init__(
        self,
        iterations=10,
        spatial_weight=3.0,
        spatial_stddev=3.0,
        bilateral_weight=4.0,
        bilateral_spatial_stddev=49.0,
        bilateral_color_stddev=5.0,
        method="fast",
    ):
        self.iterations = iterations
        self.spatial_weight = spatial_weight
        self.spatial_stddev = spatial_stddev
        self.bilateral_weight = bilateral_weight
        self.bilateral_spatial_stddev = bilateral_spatial_stddev
        self.bilateral_color_stddev = bilateral_color_stddev
        self.method = method

    @property
    def params_(self) -> CrfParams:
        return CrfParams(
            iterations=self.iterations,
            spatial_weight=self.spatial_weight,
            spatial_stddev=self.spatial_stddev,
            bilateral_weight=self.bilateral_weight,
            bilateral_spatial_stddev=self.bilateral_spatial_stddev,
            bilateral_color_stddev=self.bilateral_color_stddev,
        )

    def fit(self, X=None, y=None):
        self.params_
        _check_method(self.method)
        return self

    def refine(self, p, img) -> np.ndarray:
        fn = refine_fast if self.method == "fast" else refine_naive
        return fn(p, img, self.params_)

    def refine_batch(self, p, img) -> np.ndarray:
        return refine_batch(p, img, self.params_, method=self.method)

    def refiner(self, img) -> ImageRefiner:
        """Solver with this image's kernels prebuilt, for repeated calls."""
        return ImageRefiner(img, self.params_, self.method)
