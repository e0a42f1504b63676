import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import blocky_image, random_probs
from urn._permutohedral import PermutohedralLattice
from urn._validation import ValidationError
from urn.crf import (
    CrfParams,
    DenseCRF,
    ImageRefiner,
    _separable_raw,
    refine_batch,
    refine_fast,
    refine_naive,
)


def one_step_oracle(p, img, prm):
    """One mean-field step written out pixel pair by pixel pair."""
    c, h, w = p.shape
    pix = [(i, j) for i in range(h) for j in range(w)]
    n = len(pix)
    ks = [[0.0] * n for _ in range(n)]
    kb = [[0.0] * n for _ in range(n)]
    for a, (i, j) in enumerate(pix):
        for b, (k, l) in enumerate(pix):
            d2 = (i - k) ** 2 + (j - l) ** 2
            ks[a][b] = math.exp(-d2 / (2 * prm.spatial_stddev ** 2))
            c2 = sum((float(img[i, j, t]) - float(img[k, l, t])) ** 2 for t in range(3))
            kb[a][b] = math.exp(-d2 / (2 * prm.bilateral_spatial_stddev ** 2)
                                - c2 / (2 * prm.bilateral_color_stddev ** 2))
    ds = [sum(r) for r in ks]
    db = [sum(r) for r in kb]
    q0 = []
    for a, (i, j) in enumerate(pix):
        vals = [max(p[l, i, j], 1e-8) for l in range(c)]
        s = sum(vals)
        q0.append([v / s for v in vals])
    out = np.zeros_like(p)
    for a, (i, j) in enumerate(pix):
        e = []
        for l in range(c):
            ms = sum(ks[a][b] / math.sqrt(ds[a] * ds[b]) * q0[b][l] for b in range(n))
            mb = sum(kb[a][b] / math.sqrt(db[a] * db[b]) * q0[b][l] for b in range(n))
            e.append(math.log(max(p[l, i, j], 1e-8)) + prm.spatial_weight * ms + prm.bilateral_weight * mb)
        top = max(e)
        z = sum(math.exp(v - top) for v in e)
        for l in range(c):
            out[l, i, j] = math.exp(e[l] - top) / z
    return out


def test_naive_one_step_matches_oracle(rng):
    p = random_probs(rng, 2, 4, 4)
    img = rng.integers(0, 256, (4, 4, 3)).astype(np.uint8)
    prm = CrfParams(iterations=1, bilateral_color_stddev=40.0, bilateral_spatial_stddev=3.0)
    assert_allclose(refine_naive(p, img, prm), one_step_oracle(p, img, prm), rtol=0, atol=1e-9)


@pytest.mark.parametrize("refine", [refine_naive, refine_fast])
def test_zero_iterations_returns_renormalized_input(rng, refine):
    p = random_probs(rng, 3, 6, 5)
    p[0, 0, 0], p[1, 0, 0], p[2, 0, 0] = 0.0, 0.25, 0.75
    img = rng.integers(0, 256, (6, 5, 3)).astype(np.uint8)
    out = refine(p, img, CrfParams(iterations=0))
    clamped = np.maximum(p, 1e-8)
    assert_allclose(out, clamped / clamped.sum(axis=0), rtol=0, atol=1e-15)


@pytest.mark.parametrize("refine", [refine_naive, refine_fast])
def test_zero_weights_keep_input(rng, refine):
    p = random_probs(rng, 3, 5, 5)
    img = rng.integers(0, 256, (5, 5, 3)).astype(np.uint8)
    out = refine(p, img, CrfParams(iterations=7, spatial_weight=0.0, bilateral_weight=0.0))
    assert_allclose(out, p, atol=1e-12)


@pytest.mark.parametrize("refine", [refine_naive, refine_fast])
def test_simplex_after_every_iteration(rng, refine):
    p = random_probs(rng, 4, 8, 8)
    img = blocky_image(rng, 8, 8)
    seen = []

    def check(it, q):
        seen.append(it)
        assert np.all(q >= 0) and np.all(q <= 1)
        assert_allclose(q.sum(axis=1), 1.0, atol=1e-6)

    refine(p, img, CrfParams(iterations=5), callback=check)
    assert seen == list(range(6))


def test_naive_mirror_symmetry(rng):
    img = np.full((6, 6, 3), 90, dtype=np.uint8)
    half = random_probs(rng, 2, 6, 3)
    p = np.concatenate([half, half[:, :, ::-1]], axis=2)
    out = refine_naive(p, img)
    assert_allclose(out, out[:, :, ::-1], atol=1e-9)


@pytest.mark.parametrize("refine", [refine_naive, refine_fast])
def test_label_permutation_equivariance(rng, refine):
    p = random_probs(rng, 3, 8, 8)
    img = blocky_image(rng, 8, 8)
    perm = [2, 0, 1]
    assert_allclose(refine(p[perm], img), refine(p, img)[perm], atol=1e-12)


def test_naive_cap():
    p = np.full((2, 70, 70), 0.5)
    with pytest.raises(ValidationError, match="refine_fast"):
        refine_naive(p, np.zeros((70, 70, 3), dtype=np.uint8))


def test_dimension_mismatch():
    with pytest.raises(ValidationError):
        refine_fast(np.full((2, 4, 4), 0.5), np.zeros((4, 5, 3), dtype=np.uint8))


def test_rejects_logits():
    with pytest.raises(ValidationError):
        refine_fast(np.array([[[2.0]], [[-1.0]]]), np.zeros((1, 1, 3), dtype=np.uint8))


def test_params_validation():
    with pytest.raises(ValidationError):
        CrfParams(iterations=-1)
    with pytest.raises(ValidationError):
        CrfParams(spatial_stddev=0.0)
    with pytest.raises(ValidationError):
        CrfParams(bilateral_weight=-1.0)
    assert CrfParams(spatial_weight=0.0).spatial_weight == 0.0


def test_separable_spatial_matches_dense(rng):
    h, w, s = 20, 37, 3.0
    v = rng.random((h * w, 2))
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([rr.ravel(), cc.ravel()], 1).astype(float)
    k = np.exp(-((pos[:, None] - pos[None]) ** 2).sum(-1) / (2 * s * s))
    # taps beyond 6 stddevs are dropped: relative error below exp(-18)
    assert_allclose(_separable_raw((h, w), s)(v), k @ v, rtol=0, atol=1e-7)


def test_lattice_is_linear():
    rng = np.random.default_rng(0)
    lat = PermutohedralLattice(rng.random((50, 3)) * 4)
    u, v = rng.random((50, 2)), rng.random((50, 2))
    assert_allclose(lat.filter(3.0 * u + v), 3.0 * lat.filter(u) + lat.filter(v), atol=1e-12)


def test_lattice_separates_distant_clusters():
    rng = np.random.default_rng(2)
    feats = np.concatenate([rng.random((20, 2)), rng.random((20, 2)) + 100.0])
    v = np.concatenate([np.ones(20), np.zeros(20)])[:, None]
    out = PermutohedralLattice(feats).filter(v)
    assert np.all(out[:20] > 0)
    assert_array_equal(out[20:], 0.0)


def test_lattice_approximates_gaussian():
    rng = np.random.default_rng(1)
    feats = rng.random((400, 2)) * 6
    v = rng.random((400, 1))
    lat = PermutohedralLattice(feats).filter(v, normalize=False)
    k = np.exp(-((feats[:, None] - feats[None]) ** 2).sum(-1) / 2)
    exact = k @ v
    # the lattice gain is arbitrary; compare the shapes of the responses
    corr = np.corrcoef(lat[:, 0], exact[:, 0])[0, 1]
    assert corr > 0.98


def test_batch_matches_single(rng):
    img = blocky_image(rng, 10, 9)
    stack = np.stack([random_probs(rng, 3, 10, 9) for _ in range(3)])
    out = refine_batch(stack, img)
    for b in range(3):
        assert_allclose(out[b], refine_fast(stack[b], img), atol=1e-6)


def test_image_refiner_reuse(rng):
    img = blocky_image(rng, 8, 8)
    p = random_probs(rng, 2, 8, 8)
    r = ImageRefiner(img, CrfParams(iterations=3), "naive")
    assert_array_equal(r(p[None])[0], refine_naive(p, img, CrfParams(iterations=3)))


def test_dense_crf_estimator(rng):
    img = blocky_image(rng, 8, 8)
    p = random_probs(rng, 2, 8, 8)
    est = DenseCRF(iterations=2, method="naive").fit()
    assert est.get_params()["iterations"] == 2
    assert_array_equal(est.refine(p, img), refine_naive(p, img, CrfParams(iterations=2)))
    with pytest.raises(ValidationError):
        DenseCRF(method="exact").fit()


def test_fast_is_deterministic(rng):
    img = blocky_image(rng, 16, 16)
    p = random_probs(rng, 3, 16, 16)
    assert_array_equal(refine_fast(p, img), refine_fast(p, img))


def test_crf_smooths_speckle():
    img = np.full((12, 12, 3), 100, dtype=np.uint8)
    p = np.full((2, 12, 12), 0.2)
    p[1] = 0.8
    p[0, 5, 5], p[1, 5, 5] = 0.7, 0.3
    out = refine_naive(p, img)
    assert np.argmax(out, axis=0)[5, 5] == 1


def test_fast_agrees_with_naive_on_16x16(rng):
    worst = 0.0
    for _ in range(5):
        p = random_probs(rng, 3, 16, 16)
        img = blocky_image(rng, 16, 16)
        worst = max(worst, float(np.abs(refine_fast(p, img) - refine_naive(p, img)).max()))
    assert worst <= 1e-2, f"max marginal deviation {worst:.4f}"


@pytest.mark.slow
def test_fast_benchmark_512():
    import time

    r = np.random.default_rng(0)
    p = random_probs(r, 21, 512, 512)
    img = blocky_image(r, 512, 512, n_rects=12)
    start = time.perf_counter()
    q = refine_fast(p, img)
    took = time.perf_counter() - start
    assert np.allclose(q.sum(axis=0), 1.0)
    assert took < 5.0, f"took {took:.2f} s"
