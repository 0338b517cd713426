"""Deterministic synthetic digit archives.

When the classic 28x28 handwritten-digit IDX archives are not on disk,
the benchmark can run against a stand-in generated from the small 8x8
digit set shipped with scikit-learn: each base glyph is upscaled to
28x28 and expanded into many variants via seeded affine + elastic
deformations and ink-level jitter. Glyph pools for the two archives are
disjoint, mirroring the train/test archive disjointness of the real
data, and everything is reproducible from the seed.

The stand-in keeps the benchmark's structure (digit classes, counts,
corruption pipeline) but is easier than real handwriting; absolute
scores are not comparable to runs on the real archives.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

from .data import CANONICAL_TEST_COUNTS, CANONICAL_TRAIN_COUNTS, LabeledImageSet
from .errors import UsageError

_GLYPH_SPLIT = 0.6  # fraction of base glyphs reserved for the train archive


def _base_glyphs(digit: int, pool: str) -> np.ndarray:
    """28x28 float glyphs for one digit, from the train or test pool."""
    ds = load_digits()
    sel = np.flatnonzero(ds.target == digit)
    cut = int(round(_GLYPH_SPLIT * len(sel)))
    chosen = sel[:cut] if pool == "train" else sel[cut:]
    if len(chosen) == 0:
        raise UsageError(f"no base glyphs for digit {digit} in pool {pool!r}")
    out = np.empty((len(chosen), 28, 28))
    for i, j in enumerate(chosen):
        img = ds.images[j] / 16.0
        out[i] = np.clip(ndimage.zoom(img, 3.5, order=3), 0.0, 1.0)
    return out


def _deform(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = rng.uniform(-0.2, 0.2)
    scale = rng.uniform(0.9, 1.1, size=2)
    shear = rng.uniform(-0.1, 0.1)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    m = rot @ sh @ np.diag(scale)
    minv = np.linalg.inv(m)
    shift = rng.uniform(-2.0, 2.0, size=2)
    offset = c - minv @ (c + shift)
    out = ndimage.affine_transform(img, minv, offset=offset, order=1, cval=0.0)

    # elastic wobble: smoothed random displacement field, ~1.5 px amplitude
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma=4.0)
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma=4.0)
    amp = 1.5 / max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = ndimage.map_coordinates(out, [yy + amp * dy, xx + amp * dx], order=1, cval=0.0)

    out = out * rng.uniform(0.85, 1.0)
    return np.clip(out, 0.0, 1.0)


def synthetic_digit_archive(
    origin: str, counts: dict[int, int], pool: str, seed: int = 0
) -> LabeledImageSet:
    """Build one archive with the given per-digit counts.

    ``pool`` selects the disjoint glyph subset ("train" or "test") so the
    two archives never share a base glyph.
    """
    if pool not in ("train", "test"):
        raise UsageError(f"pool must be 'train' or 'test', got {pool!r}")
    images, labels = [], []
    for digit in sorted(counts):
        n = counts[digit]
        if n <= 0:
            continue
        glyphs = _base_glyphs(digit, pool)
        rng = np.random.default_rng((seed, pool == "test", digit))
        block = np.empty((n, 28, 28))
        for i in range(n):
            block[i] = _deform(glyphs[i % len(glyphs)], rng)
        images.append(block)
        labels.append(np.full(n, digit, dtype=np.int64))
    if not images:
        raise UsageError("counts request zero images")
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng((seed, 977, len(images))).permutation(len(images))
    return LabeledImageSet(
        images=images[order], digit_labels=labels[order], corruptions="identity", origin=origin
    )


def scaled_counts(counts: dict[int, int], factor: float) -> dict[int, int]:
    """Shrink canonical counts proportionally (at least 2 per digit)."""
    if not (0.0 < factor <= 1.0):
        raise UsageError(f"factor must be in (0, 1], got {factor}")
    return {d: max(2, int(round(n * factor))) for d, n in counts.items()}


def synthetic_archives(
    digits: tuple[int, ...] = (3, 4, 8),
    factor: float = 1.0,
    seed: int = 0,
) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Canonical-count (optionally scaled) train and test archives."""
    tr = scaled_counts({d: CANONICAL_TRAIN_COUNTS[d] for d in digits}, factor)
    te = scaled_counts({d: CANONICAL_TEST_COUNTS[d] for d in digits}, factor)
    return (
        synthetic_digit_archive("synth-train", tr, pool="train", seed=seed),
        synthetic_digit_archive("synth-test", te, pool="test", seed=seed),
    )
