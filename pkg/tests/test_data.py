"""Loader byte-format checks, corruption invariants and split construction."""

import gzip
import struct

import numpy as np
import pytest

from ogae.data import (
    CANONICAL_TEST_COUNTS,
    CANONICAL_TRAIN_COUNTS,
    CorruptionSpec,
    LabeledImageSet,
    TEST_CORRUPTIONS,
    TRAIN_CORRUPTIONS,
    apply_corruption,
    binary_labels,
    build_experiment1_splits,
    corrupt_set,
    load_idx,
    load_npy_corrupted,
    synth_gaussian_blobs,
    translate_images,
)
from ogae.errors import DataFormatError, ShapeError, UsageError


def _idx_image_bytes(images_u8):
    n, h, w = images_u8.shape
    return struct.pack(">IIII", 0x00000803, n, h, w) + images_u8.tobytes()


def _idx_label_bytes(labels_u8):
    return struct.pack(">II", 0x00000801, len(labels_u8)) + bytes(labels_u8)


@pytest.fixture
def idx_pair(tmp_path, rng):
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = np.array([3, 8, 3, 4, 3], dtype=np.uint8)
    ip = tmp_path / "images-idx3-ubyte"
    lp = tmp_path / "labels-idx1-ubyte"
    ip.write_bytes(_idx_image_bytes(images))
    lp.write_bytes(_idx_label_bytes(labels))
    return ip, lp, images, labels


class TestIdxLoader:
    def test_round_trip(self, idx_pair):
        ip, lp, images, labels = idx_pair
        s = load_idx(ip, lp, origin="arch")
        assert s.images.shape == (5, 28, 28)
        assert np.array_equal(s.images, images.astype(np.float64) / 255.0)
        assert np.array_equal(s.digit_labels, labels.astype(np.int64))
        assert all(c == "identity" for c in s.corruptions)
        assert s.origin == "arch"

    def test_gzip_transparent(self, tmp_path, idx_pair):
        ip, lp, images, labels = idx_pair
        gzp = tmp_path / "images-idx3-ubyte.gz"
        with gzip.open(gzp, "wb") as fh:
            fh.write(ip.read_bytes())
        s = load_idx(gzp, lp, origin="arch")
        assert np.array_equal(s.images, images.astype(np.float64) / 255.0)

    def test_bad_image_magic(self, tmp_path, idx_pair):
        ip, lp, images, _ = idx_pair
        bad = tmp_path / "bad"
        bad.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 5, 28, 28) + images.tobytes())
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(bad, lp, origin="arch")

    def test_label_magic_rejected_for_images(self, tmp_path, idx_pair):
        ip, lp, _, _ = idx_pair
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(lp, lp, origin="arch")

    def test_truncated_payload(self, tmp_path, idx_pair):
        ip, lp, _, _ = idx_pair
        cut = tmp_path / "cut"
        cut.write_bytes(ip.read_bytes()[:-10])
        with pytest.raises(DataFormatError, match="bytes"):
            load_idx(cut, lp, origin="arch")

    def test_truncated_header(self, tmp_path, idx_pair):
        _, lp, _, _ = idx_pair
        cut = tmp_path / "cut"
        cut.write_bytes(b"\x00\x00")
        with pytest.raises(DataFormatError, match="truncated"):
            load_idx(cut, lp, origin="arch")

    def test_count_mismatch(self, tmp_path, idx_pair):
        ip, _, _, _ = idx_pair
        lp_short = tmp_path / "short-labels"
        lp_short.write_bytes(_idx_label_bytes(np.array([1, 2], dtype=np.uint8)))
        with pytest.raises(DataFormatError, match="mismatch"):
            load_idx(ip, lp_short, origin="arch")


class TestNpyLoader:
    def test_uint8_normalized(self, tmp_path, rng):
        arr = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
        p = tmp_path / "a.npy"
        np.save(p, arr)
        s = load_npy_corrupted(p, corruption="stripe")
        assert np.array_equal(s.images, arr / 255.0)
        assert all(c == "stripe" for c in s.corruptions)
        assert (s.digit_labels == -1).all()

    def test_float_passthrough_and_channel_squeeze(self, tmp_path, rng):
        arr = rng.random((3, 28, 28, 1))
        p = tmp_path / "a.npy"
        np.save(p, arr)
        s = load_npy_corrupted(p, corruption="identity")
        assert s.images.shape == (3, 28, 28)
        assert np.array_equal(s.images, arr[..., 0])

    def test_labels_file(self, tmp_path, rng):
        arr = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
        labels = np.array([3, 3, 8, 3], dtype=np.int64)
        ip, lp = tmp_path / "a.npy", tmp_path / "l.npy"
        np.save(ip, arr)
        np.save(lp, labels)
        s = load_npy_corrupted(ip, corruption="identity", labels_path=lp)
        assert np.array_equal(s.digit_labels, labels)

    def test_label_length_mismatch(self, tmp_path, rng):
        ip, lp = tmp_path / "a.npy", tmp_path / "l.npy"
        np.save(ip, rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8))
        np.save(lp, np.arange(3))
        with pytest.raises(DataFormatError, match="labels"):
            load_npy_corrupted(ip, corruption="identity", labels_path=lp)

    def test_fortran_order_rejected(self, tmp_path, rng):
        arr = np.asfortranarray(rng.random((3, 28, 28)))
        p = tmp_path / "f.npy"
        np.save(p, arr)
        with pytest.raises(DataFormatError, match="fortran"):
            load_npy_corrupted(p, corruption="identity")

    def test_not_npy(self, tmp_path):
        p = tmp_path / "junk.npy"
        p.write_bytes(b"definitely not an array")
        with pytest.raises(DataFormatError):
            load_npy_corrupted(p, corruption="identity")

    def test_truncated(self, tmp_path, rng):
        p = tmp_path / "a.npy"
        np.save(p, rng.random((3, 28, 28)))
        p.write_bytes(p.read_bytes()[:-50])
        with pytest.raises(DataFormatError, match="truncated"):
            load_npy_corrupted(p, corruption="identity")

    def test_bad_dtype(self, tmp_path):
        p = tmp_path / "a.npy"
        np.save(p, np.zeros((3, 28, 28), dtype=np.int32))
        with pytest.raises(DataFormatError, match="dtype"):
            load_npy_corrupted(p, corruption="identity")

    def test_float_out_of_range(self, tmp_path):
        p = tmp_path / "a.npy"
        np.save(p, np.full((2, 28, 28), 1.5))
        with pytest.raises(DataFormatError, match=r"\[0,1\]"):
            load_npy_corrupted(p, corruption="identity")

    def test_bad_rank(self, tmp_path):
        p = tmp_path / "a.npy"
        np.save(p, np.zeros((3, 28), dtype=np.uint8))
        with pytest.raises(DataFormatError, match="shape"):
            load_npy_corrupted(p, corruption="identity")


class TestLabeledImageSet:
    def test_length_mismatch(self, rng):
        with pytest.raises(ShapeError, match="lengths"):
            LabeledImageSet(
                images=rng.random((3, 28, 28)),
                digit_labels=np.array([1, 2]),
                corruptions="identity",
                origin="x",
            )

    def test_subset_and_ids(self, rng):
        s = LabeledImageSet(
            images=rng.random((4, 28, 28)),
            digit_labels=np.array([3, 8, 3, 4]),
            corruptions="stripe",
            origin="arch",
        )
        sub = s.subset([2, 0])
        assert len(sub) == 2
        assert list(sub.digit_labels) == [3, 3]
        assert sub.ids() == ["arch:2:stripe", "arch:0:stripe"]

    def test_concat_mixed_origin_rejected(self, rng):
        mk = lambda o: LabeledImageSet(
            images=rng.random((2, 28, 28)),
            digit_labels=np.zeros(2, dtype=int),
            corruptions="identity",
            origin=o,
        )
        with pytest.raises(UsageError, match="origins"):
            LabeledImageSet.concatenate([mk("a"), mk("b")])

    def test_fingerprint_sensitive_to_pixels(self, rng):
        imgs = rng.random((3, 28, 28))
        mk = lambda im: LabeledImageSet(
            images=im, digit_labels=np.zeros(3, dtype=int), corruptions="identity", origin="a"
        )
        a = mk(imgs.copy()).fingerprint()
        imgs2 = imgs.copy()
        imgs2[1, 10, 10] = min(1.0, imgs2[1, 10, 10] + 0.25)
        assert a != mk(imgs2).fingerprint()
        assert a == mk(imgs.copy()).fingerprint()


class TestCorruptions:
    def test_identity_bit_exact(self, rng):
        x = rng.random((3, 28, 28))
        y = apply_corruption(CorruptionSpec("identity"), x)
        assert np.array_equal(x, y)
        assert y is not x

    def test_translate_deterministic(self, rng):
        x = rng.random((6, 28, 28))
        a = apply_corruption(CorruptionSpec("translate", seed=7), x)
        b = apply_corruption(CorruptionSpec("translate", seed=7), x)
        c = apply_corruption(CorruptionSpec("translate", seed=8), x)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_translate_inverse_on_interior_digit(self, rng):
        # support confined to rows/cols 6..21 so a +/-2 shift never clips
        x = np.zeros((1, 28, 28))
        x[0, 6:22, 6:22] = rng.random((16, 16))
        fwd = translate_images(x, [(2, 0)])
        back = translate_images(fwd, [(-2, 0)])
        assert np.array_equal(back, x)
        fwd2 = translate_images(x, [(3, -4)])
        back2 = translate_images(fwd2, [(-3, 4)])
        assert np.array_equal(back2, x)

    def test_translate_zero_fills(self):
        x = np.ones((1, 28, 28))
        y = translate_images(x, [(5, 0)])
        assert (y[0, :5, :] == 0).all()
        assert (y[0, 5:, :] == 1).all()

    def test_blur_preserves_constant_interior(self):
        x = np.ones((1, 28, 28))
        y = apply_corruption(CorruptionSpec("motion-blur"), x)
        assert np.allclose(y[0, :, 2:26], 1.0)
        assert (y[0, :, 0] < 1.0).all()
        assert y.min() >= 0.0 and y.max() <= 1.0

    def test_blur_impulse_response(self):
        x = np.zeros((1, 28, 28))
        x[0, 14, 14] = 1.0
        y = apply_corruption(CorruptionSpec("motion-blur"), x)
        assert np.allclose(y[0, 14, 12:17], 0.2)
        assert np.allclose(y[0, 14, :12], 0.0)
        assert np.allclose(y[0, 13], 0.0)

    def test_stripe_inverts_band_only(self, rng):
        x = rng.random((2, 28, 28))
        y = apply_corruption(CorruptionSpec("stripe"), x)
        assert np.array_equal(y[:, 5:10, :], 1.0 - x[:, 5:10, :])
        assert np.array_equal(y[:, :5, :], x[:, :5, :])
        assert np.array_equal(y[:, 10:, :], x[:, 10:, :])
        # involution
        assert np.array_equal(apply_corruption(CorruptionSpec("stripe"), y), x)

    def test_brightness_clips(self):
        x = np.full((1, 28, 28), 0.9)
        x[0, 0, 0] = 0.2
        y = apply_corruption(CorruptionSpec("brightness"), x)
        assert y[0, 1, 1] == 1.0
        assert np.isclose(y[0, 0, 0], 0.5)

    def test_canny_binary_output(self, rng):
        x = np.zeros((2, 28, 28))
        x[0, 8:20, 8:20] = 1.0  # sharp square: must produce edges
        y = apply_corruption(CorruptionSpec("canny-edges"), x)
        assert set(np.unique(y)) <= {0.0, 1.0}
        assert y[0].sum() > 0
        assert y[1].sum() == 0  # blank image has no edges

    def test_canny_edges_near_boundary(self):
        x = np.zeros((1, 28, 28))
        x[0, :, 14:] = 1.0
        y = apply_corruption(CorruptionSpec("canny-edges"), x)
        cols = np.flatnonzero(y[0].sum(axis=0))
        assert len(cols) > 0
        assert all(12 <= c <= 16 for c in cols)

    def test_all_kinds_stay_in_range(self, rng):
        x = rng.random((4, 28, 28))
        for kind in ("identity", "translate", "motion-blur", "stripe", "canny-edges", "brightness"):
            y = apply_corruption(CorruptionSpec(kind, seed=3), x)
            assert y.shape == x.shape
            assert y.min() >= 0.0 and y.max() <= 1.0, kind

    def test_unknown_kind(self):
        with pytest.raises(UsageError, match="unknown corruption"):
            CorruptionSpec("salt-and-pepper")

    def test_bad_rank(self, rng):
        with pytest.raises(ShapeError):
            apply_corruption(CorruptionSpec("identity"), rng.random((28, 28)))

    def test_corrupt_set_layout(self, rng):
        base = LabeledImageSet(
            images=rng.random((5, 28, 28)),
            digit_labels=np.array([3, 3, 8, 3, 4]),
            corruptions="identity",
            origin="arch",
        )
        out = corrupt_set(base, TEST_CORRUPTIONS, seed=0)
        assert len(out) == 15
        assert sorted(set(out.corruptions)) == sorted(TEST_CORRUPTIONS)
        assert np.array_equal(out.digit_labels, np.tile(base.digit_labels, 3))
        assert np.array_equal(out.source_indices, np.tile(base.source_indices, 3))


def _fake_archive(origin, counts, rng):
    images, labels = [], []
    for digit, n in counts.items():
        images.append(rng.random((n, 28, 28)))
        labels.append(np.full(n, digit, dtype=np.int64))
    return LabeledImageSet(
        images=np.concatenate(images),
        digit_labels=np.concatenate(labels),
        corruptions="identity",
        origin=origin,
    )


class TestSplits:
    def test_sizes_and_composition(self, rng):
        tr = _fake_archive("train-arch", {3: 10, 8: 8}, rng)
        te = _fake_archive("test-arch", {3: 5, 8: 4}, rng)
        splits = build_experiment1_splits(tr, te, seed=1, strict_counts=False)
        assert len(splits["train"]) + len(splits["earlystop"]) == 30
        assert len(splits["train"]) == 27
        assert len(splits["val"]) == 27
        assert len(splits["test"]) == 54
        assert set(splits["train"].digit_labels) == {3}
        assert set(splits["earlystop"].digit_labels) == {3}
        assert set(splits["val"].digit_labels) == {3, 8}
        assert set(splits["train"].corruptions) <= set(TRAIN_CORRUPTIONS)
        assert set(splits["val"].corruptions) == set(TEST_CORRUPTIONS)
        assert set(splits["test"].corruptions) == set(TEST_CORRUPTIONS)

    def test_val_test_disjoint_images(self, rng):
        tr = _fake_archive("train-arch", {3: 10, 8: 8}, rng)
        te = _fake_archive("test-arch", {3: 5, 8: 4}, rng)
        splits = build_experiment1_splits(tr, te, seed=1, strict_counts=False)
        assert splits["val"].content_hashes().isdisjoint(splits["test"].content_hashes())

    def test_train_earlystop_partition(self, rng):
        tr = _fake_archive("train-arch", {3: 10, 8: 8}, rng)
        te = _fake_archive("test-arch", {3: 5, 8: 4}, rng)
        splits = build_experiment1_splits(tr, te, seed=1, strict_counts=False)
        a = set(splits["train"].ids())
        b = set(splits["earlystop"].ids())
        assert not a & b
        assert len(a | b) == 30

    def test_binary_labels(self, rng):
        tr = _fake_archive("train-arch", {3: 6, 8: 5}, rng)
        te = _fake_archive("test-arch", {3: 4, 8: 3}, rng)
        splits = build_experiment1_splits(tr, te, seed=1, strict_counts=False)
        y = binary_labels(splits["val"], normal_digit=3)
        assert set(y) == {0, 1}
        assert y.sum() == 3 * 3  # eights under three corruptions

    def test_strict_counts_rejects_subsets(self, rng):
        tr = _fake_archive("train-arch", {3: 10, 8: 8}, rng)
        te = _fake_archive("test-arch", {3: 5, 8: 4}, rng)
        with pytest.raises(DataFormatError, match="canonical"):
            build_experiment1_splits(tr, te, seed=1, strict_counts=True)

    def test_nonstrict_warns(self, rng, caplog):
        tr = _fake_archive("train-arch", {3: 10, 8: 8}, rng)
        te = _fake_archive("test-arch", {3: 5, 8: 4}, rng)
        import logging

        with caplog.at_level(logging.WARNING, logger="ogae.data"):
            build_experiment1_splits(tr, te, seed=1, strict_counts=False)
        assert any("canonical" in r.message for r in caplog.records)

    def test_same_origin_rejected(self, rng):
        tr = _fake_archive("arch", {3: 6, 8: 5}, rng)
        te = _fake_archive("arch", {3: 4, 8: 3}, rng)
        with pytest.raises(UsageError, match="origins"):
            build_experiment1_splits(tr, te, seed=1, strict_counts=False)

    def test_same_digit_rejected(self, rng):
        tr = _fake_archive("train-arch", {3: 6}, rng)
        te = _fake_archive("test-arch", {3: 4}, rng)
        with pytest.raises(UsageError, match="differ"):
            build_experiment1_splits(tr, te, outlier_digit=3, seed=1, strict_counts=False)

    def test_deterministic_per_seed(self, rng):
        tr = _fake_archive("train-arch", {3: 10, 8: 8}, rng)
        te = _fake_archive("test-arch", {3: 5, 8: 4}, rng)
        a = build_experiment1_splits(tr, te, seed=5, strict_counts=False)
        b = build_experiment1_splits(tr, te, seed=5, strict_counts=False)
        c = build_experiment1_splits(tr, te, seed=6, strict_counts=False)
        for k in ("train", "earlystop", "val", "test"):
            assert a[k].fingerprint() == b[k].fingerprint()
        assert a["train"].fingerprint() != c["train"].fingerprint()

    def test_alternate_outlier_digit(self, rng):
        tr = _fake_archive("train-arch", {3: 6, 4: 7}, rng)
        te = _fake_archive("test-arch", {3: 4, 4: 5}, rng)
        splits = build_experiment1_splits(tr, te, outlier_digit=4, seed=1, strict_counts=False)
        assert set(splits["val"].digit_labels) == {3, 4}
        assert len(splits["test"]) == (6 + 7) * 3

    def test_canonical_counts_table(self):
        assert CANONICAL_TRAIN_COUNTS[3] == 6131
        assert CANONICAL_TRAIN_COUNTS[8] == 5851
        assert CANONICAL_TRAIN_COUNTS[4] == 5842
        assert CANONICAL_TEST_COUNTS[3] == 1010
        assert CANONICAL_TEST_COUNTS[8] == 974
        assert CANONICAL_TEST_COUNTS[4] == 982


class TestBlobs:
    def test_shapes_and_labels(self):
        x, y = synth_gaussian_blobs(40, 10, seed=3)
        assert x.shape == (50, 2)
        assert y.sum() == 10
        assert (y[:40] == 0).all()

    def test_deterministic(self):
        a, _ = synth_gaussian_blobs(30, 5, seed=9)
        b, _ = synth_gaussian_blobs(30, 5, seed=9)
        assert np.array_equal(a, b)

    def test_outliers_in_box(self):
        x, y = synth_gaussian_blobs(10, 50, seed=0, box=4.0)
        assert np.abs(x[y == 1]).max() <= 4.0

    def test_multi_center(self):
        x, y = synth_gaussian_blobs(21, 0, seed=0, centers=((0, 0), (5, 5)), spread=0.1)
        near0 = (np.linalg.norm(x, axis=1) < 1).sum()
        near5 = (np.linalg.norm(x - 5, axis=1) < 1).sum()
        assert near0 + near5 == 21
        assert near0 == 11  # remainder goes to the first center
