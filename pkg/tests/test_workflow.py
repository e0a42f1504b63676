import numpy as np
import pytest
from numpy.testing import assert_array_equal

from urn._validation import ValidationError
from urn.synth import NoiseSpec, SynthConfig, SynthDataset, generate_one, inject_noise
from urn.workflow import RunConfig, map_ordered, run_loop, split_indices, uncertainty_or_zero


def tiny_dataset(n=6, size=24):
    cfg = SynthConfig(n_images=n, height=size, width=size, size_range=(3, 6), seed=2)
    images, gts, noisy, noise = [], [], [], []
    for i in range(n):
        img, gt = generate_one(cfg, i)
        m, ind = inject_noise(gt, NoiseSpec(seed=i))
        images.append(img)
        gts.append(gt)
        noisy.append(m)
        noise.append(ind)
    return SynthDataset(images, gts, noisy, noise, {"n_shape_classes": "3"})


def test_split_is_a_suffix():
    assert split_indices(8, 0.25) == ([0, 1, 2, 3, 4, 5], [6, 7])
    assert split_indices(2, 0.01) == ([0], [1])
    assert split_indices(3, 0.99) == ([0], [1, 2])
    with pytest.raises(ValidationError):
        split_indices(1, 0.5)


def test_map_ordered_keeps_order():
    assert map_ordered(lambda v: v * v, range(20), 4) == [v * v for v in range(20)]


def test_run_config_round_trip():
    cfg = RunConfig(scales="0.5,2", threshold=0.1, use_crf=False, crf_iterations=3)
    values = dict(line.split(" = ", 1) for line in cfg.to_lines())
    assert RunConfig.from_mapping(values) == cfg
    assert cfg.crf_params().iterations == 3
    assert cfg.scale_set().factors == (0.5, 2.0)


def test_run_config_rejects():
    with pytest.raises(ValidationError):
        RunConfig(threshold=-0.1)
    with pytest.raises(ValidationError):
        RunConfig(holdout=1.0)
    with pytest.raises(ValidationError):
        RunConfig.from_mapping({"use_crf": "maybe"})
    with pytest.raises(ValidationError):
        RunConfig.from_mapping({"colour": "red"})


def test_background_only_mask_has_zero_uncertainty():
    u = uncertainty_or_zero(np.zeros((3, 5, 5)), np.zeros((5, 5, 3), np.uint8), np.zeros((5, 5), int), RunConfig())
    assert_array_equal(u, 0.0)


def test_loop_in_memory_is_thread_independent():
    data = tiny_dataset()
    base = dict(epochs=2, crf_iterations=2, scales="0.5,2")
    a = run_loop(data, RunConfig(**base))
    b = run_loop(data, RunConfig(threads=3, **base))
    assert a.report == b.report
    for ua, ub in zip(a.uncertainty, b.uncertainty):
        assert ua.tobytes() == ub.tobytes()
    assert set(a.models) == {"baseline", "urn", "probability"}
    for y in a.weights:
        assert set(np.unique(y)) <= {13 / 255, 1.0}


def test_identity_scales_leave_training_unchanged():
    data = tiny_dataset()
    res = run_loop(data, RunConfig(epochs=2, scales="1,1", use_crf=False, probability_baseline=False))
    assert res.report["miou_urn"] == res.report["miou_baseline"]
    assert res.models["urn"].weights.tobytes() == res.models["baseline"].weights.tobytes()
    assert res.report["weighted_pixel_share"] == 0.0
