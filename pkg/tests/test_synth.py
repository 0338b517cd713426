"""Synthetic digit archive: determinism, counts, pool disjointness."""

import numpy as np
import pytest

from ogae.data import CANONICAL_TEST_COUNTS, CANONICAL_TRAIN_COUNTS
from ogae.errors import UsageError
from ogae.synth import scaled_counts, synthetic_archives, synthetic_digit_archive


def test_counts_and_shapes():
    s = synthetic_digit_archive("a", {3: 12, 8: 7}, pool="train", seed=0)
    assert len(s) == 19
    assert (s.digit_labels == 3).sum() == 12
    assert (s.digit_labels == 8).sum() == 7
    assert s.images.shape == (19, 28, 28)
    assert s.images.min() >= 0.0 and s.images.max() <= 1.0


def test_deterministic():
    a = synthetic_digit_archive("a", {3: 8}, pool="train", seed=4)
    b = synthetic_digit_archive("a", {3: 8}, pool="train", seed=4)
    c = synthetic_digit_archive("a", {3: 8}, pool="train", seed=5)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_pools_disjoint_content():
    a = synthetic_digit_archive("a", {3: 8}, pool="train", seed=4)
    b = synthetic_digit_archive("b", {3: 8}, pool="test", seed=4)
    assert not np.array_equal(a.images, b.images)


def test_images_look_like_digits():
    # ink somewhere, background elsewhere
    s = synthetic_digit_archive("a", {3: 5}, pool="train", seed=1)
    per_image_ink = s.images.reshape(5, -1).mean(axis=1)
    assert (per_image_ink > 0.02).all()
    assert (per_image_ink < 0.6).all()


def test_bad_pool():
    with pytest.raises(UsageError, match="pool"):
        synthetic_digit_archive("a", {3: 5}, pool="val", seed=0)


def test_scaled_counts():
    c = scaled_counts({3: 100, 8: 51}, 0.1)
    assert c == {3: 10, 8: 5}
    assert scaled_counts({3: 5}, 0.01) == {3: 2}  # floor of 2
    assert scaled_counts(CANONICAL_TRAIN_COUNTS, 1.0) == CANONICAL_TRAIN_COUNTS
    with pytest.raises(UsageError):
        scaled_counts({3: 5}, 0.0)


def test_archives_pair():
    tr, te = synthetic_archives(digits=(3, 8), factor=0.005, seed=2)
    assert tr.origin != te.origin
    assert set(tr.digit_labels) == {3, 8}
    assert (tr.digit_labels == 3).sum() == round(CANONICAL_TRAIN_COUNTS[3] * 0.005)
    assert (te.digit_labels == 8).sum() == max(2, round(CANONICAL_TEST_COUNTS[8] * 0.005))
