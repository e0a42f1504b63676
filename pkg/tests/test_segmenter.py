import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import ndimage

from conftest import blocky_image
from urn._validation import ValidationError
from urn.crf import CrfParams
from urn.segmenter import (
    N_FEATURES,
    ModelFormatError,
    PixelSoftmaxSegmenter,
    ToyModel,
    TrainConfig,
    distill_relabel,
    extract_features,
    load_model,
    loss_and_gradient,
    predict,
    save_model,
    train,
)
from urn.synth import make_separable


def window_oracle(img):
    """3x3 clamped-window mean and population std, one pixel at a time."""
    h, w = img.shape[:2]
    rgb = img.astype(np.float64) / 255.0
    mean = np.zeros((h, w, 3))
    std = np.zeros((h, w, 3))
    for i in range(h):
        for j in range(w):
            vals = [rgb[min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)]
                    for di in (-1, 0, 1) for dj in (-1, 0, 1)]
            vals = np.array(vals)
            mean[i, j] = vals.sum(axis=0) / 9
            std[i, j] = np.sqrt(((vals - mean[i, j]) ** 2).sum(axis=0) / 9)
    return mean, std


def accuracy(model, data):
    hits = total = 0
    for img, gt in data:
        hits += int(np.sum(np.argmax(predict(model, img), axis=0) == gt))
        total += gt.size
    return hits / total


@pytest.fixture(scope="module")
def separable():
    return make_separable()


@pytest.fixture(scope="module")
def separable_model(separable):
    return train(separable, TrainConfig(epochs=50))


def test_constant_image_has_zero_std():
    f = extract_features(np.full((4, 5, 3), 77, np.uint8))
    assert f.shape == (4, 5, N_FEATURES)
    assert_array_equal(f[..., 8:], 0.0)
    assert_allclose(f[..., 5:8], 77 / 255)


def test_position_features():
    f = extract_features(np.zeros((6, 7, 3), np.uint8))
    assert_array_equal(f[0, 0, 3:5], [0.0, 0.0])
    assert_array_equal(f[-1, -1, 3:5], [1.0, 1.0])


def test_window_statistics_match_loop_oracle(rng):
    img = rng.integers(0, 256, (5, 5, 3)).astype(np.uint8)
    f = extract_features(img)
    mean, std = window_oracle(img)
    assert_allclose(f[..., 5:8], mean, rtol=0, atol=1e-12)
    assert_allclose(f[..., 8:11], std, rtol=0, atol=1e-12)
    assert_array_equal(f[..., :3], img / 255.0)


def test_unit_weights_equal_absent_weights(separable):
    cfg = TrainConfig(epochs=2, seed=3)
    a = train(separable, cfg)
    b = train([(img, m, np.ones(m.shape)) for img, m in separable], cfg)
    assert_array_equal(a.weights, b.weights)
    assert_array_equal(a.bias, b.bias)


def test_separable_fixture(separable, separable_model):
    assert accuracy(separable_model, separable) >= 0.99
    assert accuracy(separable_model, separable[:1]) >= 0.99
    assert all(np.isfinite(separable_model.loss_curve))
    assert len(separable_model.loss_curve) == 50


def test_doubled_weights_with_halved_rate(separable):
    a = train(separable, TrainConfig(learning_rate=0.5, epochs=1))
    b = train([(img, m, np.full(m.shape, 2.0)) for img, m in separable],
              TrainConfig(learning_rate=0.25, epochs=1))
    for img, _ in separable:
        assert_array_equal(np.argmax(predict(a, img), axis=0), np.argmax(predict(b, img), axis=0))
    assert_allclose(a.weights, b.weights, rtol=1e-12, atol=1e-14)


def fd_gradient(model, data, eps=1e-6):
    """Central differences of the mean weighted loss in every parameter."""
    w0, b0 = model.weights, model.bias

    def loss(w, b):
        return loss_and_gradient(ToyModel(w, b), data)[0]

    gw = np.zeros_like(w0)
    for idx in np.ndindex(w0.shape):
        step = np.zeros_like(w0)
        step[idx] = eps
        gw[idx] = (loss(w0 + step, b0) - loss(w0 - step, b0)) / (2 * eps)
    gb = np.array([(loss(w0, b0 + eps * e) - loss(w0, b0 - eps * e)) / (2 * eps) for e in np.eye(b0.size)])
    return gw, gb


def scalar_loss(model, img, m, y):
    """Mean weighted loss with one pixel at a time."""
    f = extract_features(img)
    total, count = 0.0, 0
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            if m[i, j] == 255:
                continue
            z = model.weights @ f[i, j] + model.bias
            z = z - z.max()
            total += -y[i, j] * (z[m[i, j]] - np.log(np.exp(z).sum()))
            count += 1
    return total / count


def test_loss_and_gradient(rng):
    img = rng.integers(0, 256, (4, 5, 3)).astype(np.uint8)
    m = rng.integers(0, 3, (4, 5))
    m[0, 0] = 255
    y = rng.random((4, 5))
    model = ToyModel(rng.normal(size=(3, N_FEATURES)) * 0.3, rng.normal(size=3) * 0.3)
    loss, gw, gb = loss_and_gradient(model, [(img, m, y)])
    assert abs(loss - scalar_loss(model, img, m, y)) < 1e-12
    nw, nb = fd_gradient(model, [(img, m, y)])
    assert np.abs(gw - nw).max() / np.abs(nw).max() < 1e-5
    assert np.abs(gb - nb).max() / np.abs(nb).max() < 1e-5


def test_full_batch_step_descends_the_gradient(rng):
    img = rng.integers(0, 256, (4, 5, 3)).astype(np.uint8)
    m = rng.integers(0, 3, (4, 5))
    y = rng.random((4, 5))
    _, gw, gb = loss_and_gradient(ToyModel.zeros(3), [(img, m, y)])
    model = train([(img, m, y)], TrainConfig(learning_rate=1.0, epochs=1, batch_size=20), n_classes=3)
    assert_allclose(model.weights, -gw, rtol=1e-12, atol=1e-15)
    assert_allclose(model.bias, -gb, rtol=1e-12, atol=1e-15)


def test_same_seed_is_bit_exact(separable):
    cfg = TrainConfig(epochs=3, seed=11, batch_size=100)
    a, b = train(separable, cfg), train(separable, cfg)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.loss_curve == b.loss_curve
    c = train(separable, TrainConfig(epochs=3, seed=12, batch_size=100))
    assert c.weights.tobytes() != a.weights.tobytes()


def test_zero_model_gives_uniform(rng):
    z = predict(ToyModel.zeros(4), rng.integers(0, 256, (3, 3, 3)).astype(np.uint8))
    assert_array_equal(z, 0.0)
    assert z.shape == (4, 3, 3)


def test_mirror_equivariance(rng, separable_model):
    img = blocky_image(rng, 9, 11)
    w = separable_model.weights.copy()
    b = separable_model.bias.copy()
    # col' = 1 - col, so flip the column weight and move it into the bias
    w_m, b_m = w.copy(), b + w[:, 4]
    w_m[:, 4] = -w[:, 4]
    mirrored = predict(ToyModel(w_m, b_m), img[:, ::-1])
    assert_allclose(mirrored[:, :, ::-1], predict(separable_model, img), rtol=0, atol=1e-12)


def test_training_errors():
    with pytest.raises(ValidationError, match="empty dataset"):
        train([])
    img = np.zeros((2, 2, 3), np.uint8)
    with pytest.raises(ValidationError, match="empty target"):
        train([(img, np.full((2, 2), 255))])
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(reweight="entropy")


def test_save_load_round_trip(tmp_path, separable_model):
    path = tmp_path / "m.urnm"
    save_model(separable_model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"URNM"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 2, N_FEATURES]
    assert len(raw) == 16 + 8 * (2 * N_FEATURES + 2)
    back = load_model(path)
    assert back.weights.tobytes() == separable_model.weights.tobytes()
    assert back.bias.tobytes() == separable_model.bias.tobytes()


def test_load_rejects_bad_files(tmp_path, separable_model):
    path = tmp_path / "m.urnm"
    save_model(separable_model, path)
    raw = path.read_bytes()
    for name, data in [("magic", b"XXXX" + raw[4:]), ("short", raw[:-8]),
                       ("version", raw[:4] + b"\x02\x00\x00\x00" + raw[8:])]:
        bad = tmp_path / name
        bad.write_bytes(data)
        with pytest.raises(ModelFormatError):
            load_model(bad)


def test_distill_without_crf_is_teacher_argmax(separable, separable_model):
    images = [img for img, _ in separable]
    masks = distill_relabel(separable_model, images)
    for img, m in zip(images, masks):
        assert_array_equal(m, np.argmax(predict(separable_model, img), axis=0))


def test_student_reaches_teacher_accuracy(separable, separable_model):
    images = [img for img, _ in separable]
    student = train(list(zip(images, distill_relabel(separable_model, images))), TrainConfig(epochs=50))
    assert accuracy(student, separable) >= accuracy(separable_model, separable) - 0.01


def count_islands(mask):
    """Pixels whose 4 neighbours all carry a different label."""
    p = np.pad(mask, 1, mode="edge")
    c = p[1:-1, 1:-1]
    return int(np.sum((p[:-2, 1:-1] != c) & (p[2:, 1:-1] != c) & (p[1:-1, :-2] != c) & (p[1:-1, 2:] != c)))


def test_crf_removes_speckle_islands(separable_model):
    rng = np.random.default_rng(7)
    images = []
    for img, _ in make_separable(n_images=3, size=32, seed=5):
        img = img.copy()
        flips = rng.random(img.shape[:2]) < 0.03
        img[flips] = 255 - img[flips]
        images.append(img)
    plain = distill_relabel(separable_model, images)
    refined = distill_relabel(separable_model, images, CrfParams())
    before = sum(count_islands(m) for m in plain)
    after = sum(count_islands(m) for m in refined)
    assert before > 0
    assert after <= before
    assert sum(ndimage.label(m == 1)[1] for m in refined) <= sum(ndimage.label(m == 1)[1] for m in plain)


def test_estimator(separable):
    images = [img for img, _ in separable]
    masks = [m for _, m in separable]
    est = PixelSoftmaxSegmenter(epochs=50).fit(images, masks)
    assert est.score(images, masks) >= 0.99
    assert_array_equal(est.classes_, [0, 1])
    assert est.coef_.shape == (2, N_FEATURES)
    probs = est.predict_proba(images[:1])[0]
    assert_allclose(probs.sum(axis=0), 1.0)
    weighted = PixelSoftmaxSegmenter(epochs=2).fit(images, masks, [np.ones(m.shape) for m in masks])
    plain = PixelSoftmaxSegmenter(epochs=2).fit(images, masks)
    assert_array_equal(weighted.coef_, plain.coef_)
    with pytest.raises(ValidationError):
        PixelSoftmaxSegmenter().fit(images, masks[:1])
