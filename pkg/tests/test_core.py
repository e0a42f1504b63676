import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from urn._validation import (
    ValidationError,
    check_gray_map,
    check_label_mask,
    check_rgb_image,
    check_score_map,
)
from urn.core import argmax_over_classes, log_softmax_over_classes, present_classes, softmax_over_classes

logit_maps = st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(-50, 50))
)


def test_softmax_single_class_is_certain():
    assert_array_equal(softmax_over_classes(np.array([[[3.0, -7.0]]])), [[[1.0, 1.0]]])


def test_softmax_symmetric_pair():
    assert_allclose(softmax_over_classes(np.zeros((2, 1, 1)))[:, 0, 0], [0.5, 0.5])


def test_softmax_closed_form():
    p = softmax_over_classes(np.array([[[1.0]], [[0.0]]]))[:, 0, 0]
    expected = 1.0 / (1.0 + np.exp(-1.0))
    assert_allclose(p, [expected, 1 - expected], rtol=0, atol=1e-15)
    assert_allclose(p, [0.7310586, 0.2689414], atol=1e-7)


def test_softmax_large_logits_do_not_overflow():
    p = softmax_over_classes(np.array([[[1000.0]], [[999.0]]]))
    assert np.all(np.isfinite(p))


def test_softmax_rejects_non_finite():
    with pytest.raises(ValidationError):
        softmax_over_classes(np.array([[[np.nan]], [[0.0]]]))


@given(logit_maps)
def test_softmax_columns_sum_to_one(x):
    assert_allclose(softmax_over_classes(x).sum(axis=0), 1.0, atol=1e-6)


@given(logit_maps)
def test_log_softmax_matches_log_of_softmax(x):
    p = softmax_over_classes(x)
    mask = p > 1e-300
    assert_allclose(log_softmax_over_classes(x)[mask], np.log(p[mask]), atol=1e-9)


def test_argmax_picks_larger():
    assert argmax_over_classes(np.array([[[0.2]], [[0.8]]]))[0, 0] == 1


def test_argmax_tie_goes_to_lowest_index():
    assert argmax_over_classes(np.array([[[0.5]], [[0.5]]]))[0, 0] == 0


def test_argmax_matches_scan_oracle(rng):
    x = rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1)
    x[:, 0, 0] = [0.4, 0.4, 0.2]  # a tie
    out = argmax_over_classes(x)
    for i in range(4):
        for j in range(4):
            best = 0
            for c in range(1, 3):
                if x[c, i, j] > x[best, i, j]:
                    best = c
            assert out[i, j] == best


@given(logit_maps)
def test_argmax_is_softmax_invariant(x):
    # distinct logits can round to equal probabilities, so compare on pixels
    # whose winning probability is strictly largest
    p = softmax_over_classes(x)
    top = np.sort(p, axis=0)
    clear = top[-1] > top[-2] if p.shape[0] > 1 else np.ones(p.shape[1:], bool)
    assert_array_equal(argmax_over_classes(p)[clear], argmax_over_classes(x)[clear])


def test_present_classes_background_only():
    assert present_classes(np.array([[0, 255], [0, 0]])) == []


def test_present_classes_foreground():
    assert present_classes(np.array([[0, 3], [7, 255]])) == [3, 7]


def test_present_classes_with_background():
    assert present_classes(np.array([[0, 3], [7, 7]]), include_background=True) == [0, 3, 7]


def test_present_classes_all_ignore_is_empty():
    assert present_classes(np.full((2, 2), 255)) == []


@given(arrays(np.int64, (4, 4), elements=st.sampled_from([0, 1, 2, 5, 255])))
def test_present_classes_sorted_unique_subset(m):
    out = present_classes(m, include_background=True)
    assert out == sorted(set(out))
    assert all(0 <= c < 255 for c in out)
    assert set(out) == set(np.unique(m)) - {255}


def test_check_score_map_probability_sums():
    with pytest.raises(ValidationError, match="sum"):
        check_score_map(np.full((2, 1, 1), 0.6), kind="probabilities")


def test_check_score_map_shape():
    with pytest.raises(ValidationError):
        check_score_map(np.zeros((2, 3)))


def test_check_label_mask_range():
    with pytest.raises(ValidationError):
        check_label_mask(np.array([[0, 4]]), num_classes=3)
    assert_array_equal(check_label_mask(np.array([[0, 255]]), num_classes=3), [[0, 255]])


def test_check_label_mask_rejects_floats():
    with pytest.raises(ValidationError):
        check_label_mask(np.array([[0.5]]))


def test_check_gray_map_interval():
    with pytest.raises(ValidationError):
        check_gray_map(np.array([[1.5]]))
    assert check_gray_map(np.array([[1.5]]), unit_interval=False)[0, 0] == 1.5


def test_check_rgb_image():
    with pytest.raises(ValidationError):
        check_rgb_image(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        check_rgb_image(np.full((2, 2, 3), 300))
    assert check_rgb_image(np.zeros((2, 2, 3), dtype=np.int64)).dtype == np.uint8
