"""Dataset ingestion, image corruptions and the domain-shift splits.

Train-time and test-time corruption families are disjoint, which is the
point of the benchmark: models train on digits seen under {identity,
motion-blur, translate} and are evaluated on the same digit classes under
{stripe, canny-edges, brightness}. Split construction keeps validation
and test sets on disjoint underlying images by drawing them from the two
different source archives.

IDX (the classic big-endian digit format, gzip allowed) and NPY v1/v2
C-order arrays are read natively; no third-party dataset package is used.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataFormatError, ShapeError, UsageError

logger = logging.getLogger(__name__)

CORRUPTION_KINDS = ("identity", "translate", "motion-blur", "stripe", "canny-edges", "brightness")
TRAIN_CORRUPTIONS = ("identity", "motion-blur", "translate")
TEST_CORRUPTIONS = ("stripe", "canny-edges", "brightness")

# Canonical per-digit counts of the classic 60k/10k handwritten-digit
# archives, for the digits the benchmark uses.
CANONICAL_TRAIN_COUNTS = {3: 6131, 4: 5842, 8: 5851}
CANONICAL_TEST_COUNTS = {3: 1010, 4: 982, 8: 974}

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledImageSet:
    """Images with digit labels, per-image corruption tags and provenance.

    ``source_indices`` index into the origin archive, so (origin,
    source_index) identifies the underlying clean image behind each
    corrupted copy; disjointness checks and score ids build on it.
    """

    images: np.ndarray
    digit_labels: np.ndarray
    corruptions: np.ndarray
    origin: str
    source_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.digit_labels = np.asarray(self.digit_labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ShapeError(f"images must be (N, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if isinstance(self.corruptions, str):
            self.corruptions = np.full(n, self.corruptions, dtype=object)
        self.corruptions = np.asarray(self.corruptions, dtype=object)
        if self.source_indices is None:
            self.source_indices = np.arange(n, dtype=np.int64)
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
        if not (len(self.digit_labels) == n and len(self.corruptions) == n
                and len(self.source_indices) == n):
            raise ShapeError(
                f"field lengths differ: {n} images, {len(self.digit_labels)} labels, "
                f"{len(self.corruptions)} tags, {len(self.source_indices)} source indices"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataFormatError(
                f"image values must lie in [0,1], got range "
                f"[{self.images.min():.4g}, {self.images.max():.4g}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "LabeledImageSet":
        idx = np.asarray(indices)
        return LabeledImageSet(
            images=self.images[idx],
            digit_labels=self.digit_labels[idx],
            corruptions=self.corruptions[idx],
            origin=self.origin,
            source_indices=self.source_indices[idx],
        )

    def ids(self) -> list[str]:
        return [
            f"{self.origin}:{src}:{corr}"
            for src, corr in zip(self.source_indices, self.corruptions)
        ]

    def content_hashes(self) -> set[bytes]:
        """sha256 of each underlying clean-image identity (origin + index)."""
        return {
            hashlib.sha256(f"{self.origin}:{int(s)}".encode()).digest()
            for s in self.source_indices
        }

    def fingerprint(self) -> str:
        """sha256 over image bytes, labels and tags; manifests record it."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.digit_labels).tobytes())
        h.update("|".join(str(c) for c in self.corruptions).encode())
        h.update(self.origin.encode())
        return h.hexdigest()

    @staticmethod
    def concatenate(sets: list["LabeledImageSet"]) -> "LabeledImageSet":
        if not sets:
            raise UsageError("cannot concatenate zero image sets")
        origins = {s.origin for s in sets}
        if len(origins) != 1:
            raise UsageError(f"refusing to concatenate sets with mixed origins {origins}")
        return LabeledImageSet(
            images=np.concatenate([s.images for s in sets]),
            digit_labels=np.concatenate([s.digit_labels for s in sets]),
            corruptions=np.concatenate([s.corruptions for s in sets]),
            origin=sets[0].origin,
            source_indices=np.concatenate([s.source_indices for s in sets]),
        )


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

def _open_maybe_gzip(path: Path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx_array(path: Path, expect_magic: int, expect_dims: int) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        head = fh.read(4)
        if len(head) < 4:
            raise DataFormatError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", head)
        if magic != expect_magic:
            raise DataFormatError(
                f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}"
            )
        dims_raw = fh.read(4 * expect_dims)
        if len(dims_raw) < 4 * expect_dims:
            raise DataFormatError(f"{path}: truncated IDX dimension block")
        dims = struct.unpack(f">{expect_dims}I", dims_raw)
        payload = fh.read()
    count = int(np.prod(dims))
    if len(payload) < count:
        raise DataFormatError(f"{path}: expected {count} bytes of data, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, origin: str) -> LabeledImageSet:
    """Read an IDX image file and its companion label file.

    Pixel bytes are normalized to [0, 1] by /255. Image/label count
    mismatch, bad magic and truncation raise a format error.
    """
    images = _read_idx_array(Path(images_path), _IDX_IMAGES_MAGIC, 3)
    labels = _read_idx_array(Path(labels_path), _IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image/label count mismatch: {images.shape[0]} images, {labels.shape[0]} labels"
        )
    return LabeledImageSet(
        images=images.astype(np.float64) / 255.0,
        digit_labels=labels.astype(np.int64),
        corruptions="identity",
        origin=origin,
    )


def load_npy_corrupted(
    path: str | Path,
    corruption: str,
    labels_path: str | Path | None = None,
    origin: str = "npy",
) -> LabeledImageSet:
    """Read a pre-corrupted N x 28 x 28(x 1) NPY array (C order only).

    uint8 arrays are normalized by /255; float arrays must already lie in
    [0, 1]. Without a label file all digit labels are -1.
    """
    arr = _read_npy_c_order(Path(path))
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise DataFormatError(f"{path}: expected N x H x W(x 1) array, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        images = arr.astype(np.float64) / 255.0
    elif arr.dtype in (np.float32, np.float64):
        images = arr.astype(np.float64)
    else:
        raise DataFormatError(f"{path}: unsupported dtype {arr.dtype}")
    if labels_path is not None:
        labels = _read_npy_c_order(Path(labels_path))
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise DataFormatError(
                f"{labels_path}: labels shape {labels.shape} does not match {images.shape[0]} images"
            )
        labels = labels.astype(np.int64)
    else:
        labels = np.full(images.shape[0], -1, dtype=np.int64)
    return LabeledImageSet(
        images=images, digit_labels=labels, corruptions=corruption, origin=origin
    )


def _read_npy_c_order(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        try:
            version = np.lib.format.read_magic(fh)
        except ValueError as exc:
            raise DataFormatError(f"{path}: not an NPY file ({exc})") from exc
        if version == (1, 0):
            shape, fortran, dtype = np.lib.format.read_array_header_1_0(fh)
        elif version == (2, 0):
            shape, fortran, dtype = np.lib.format.read_array_header_2_0(fh)
        else:
            raise DataFormatError(f"{path}: unsupported NPY version {version}")
        if fortran:
            raise DataFormatError(f"{path}: fortran-order arrays are not supported")
        count = int(np.prod(shape)) if shape else 1
        data = fh.read()
    expected = count * dtype.itemsize
    if len(data) < expected:
        raise DataFormatError(f"{path}: truncated NPY payload ({len(data)} < {expected} bytes)")
    return np.frombuffer(data, dtype=dtype, count=count).reshape(shape)


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption family with its (pinned) parameters.

    Only ``translate`` consumes the seed; everything else is parameter-
    deterministic. All kinds map [0,1] images to [0,1] images.
    """

    kind: str
    seed: int = 0
    translate_max: int = 4
    blur_len: int = 5
    stripe_rows: tuple[int, int] = (5, 10)
    canny_low: float = 0.1
    canny_high: float = 0.2
    brightness_delta: float = 0.3

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise UsageError(f"unknown corruption {self.kind!r}, expected one of {CORRUPTION_KINDS}")


def translate_images(images: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Shift each image by integer (dy, dx) with zero fill."""
    out = np.zeros_like(images)
    h, w = images.shape[1:]
    for i, (dy, dx) in enumerate(np.asarray(shifts, dtype=int)):
        ys_dst = slice(max(0, dy), h + min(0, dy))
        ys_src = slice(max(0, -dy), h - max(0, dy))
        xs_dst = slice(max(0, dx), w + min(0, dx))
        xs_src = slice(max(0, -dx), w - max(0, dx))
        out[i, ys_dst, xs_dst] = images[i, ys_src, xs_src]
    return out


def _motion_blur(images: np.ndarray, length: int) -> np.ndarray:
    kernel = np.full(length, 1.0 / length)
    return ndimage.convolve1d(images, kernel, axis=2, mode="constant", cval=0.0)


def _stripe(images: np.ndarray, rows: tuple[int, int]) -> np.ndarray:
    out = images.copy()
    out[:, rows[0] : rows[1], :] = 1.0 - out[:, rows[0] : rows[1], :]
    return out


def _canny_edges(images: np.ndarray, low: float, high: float) -> np.ndarray:
    out = np.zeros_like(images)
    for i in range(images.shape[0]):
        gx = ndimage.sobel(images[i], axis=1)
        gy = ndimage.sobel(images[i], axis=0)
        mag = np.hypot(gx, gy)
        peak = mag.max()
        if peak > 0.0:
            mag = mag / peak
        weak = mag >= low
        strong = mag >= high
        lab, _ = ndimage.label(weak)
        keep = np.unique(lab[strong])
        keep = keep[keep > 0]
        if len(keep):
            out[i] = np.isin(lab, keep).astype(np.float64)
    return out


def apply_corruption(spec: CorruptionSpec, images: np.ndarray) -> np.ndarray:
    """Apply one corruption family to an (N, H, W) image stack."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ShapeError(f"expected (N, H, W) images, got {images.shape}")
    if spec.kind == "identity":
        return images.copy()
    if spec.kind == "translate":
        rng = np.random.default_rng(spec.seed)
        shifts = rng.integers(-spec.translate_max, spec.translate_max + 1, size=(images.shape[0], 2))
        return translate_images(images, shifts)
    if spec.kind == "motion-blur":
        return np.clip(_motion_blur(images, spec.blur_len), 0.0, 1.0)
    if spec.kind == "stripe":
        return _stripe(images, spec.stripe_rows)
    if spec.kind == "canny-edges":
        return _canny_edges(images, spec.canny_low, spec.canny_high)
    if spec.kind == "brightness":
        return np.clip(images + spec.brightness_delta, 0.0, 1.0)
    raise UsageError(f"unhandled corruption kind {spec.kind!r}")


def corrupt_set(
    base: LabeledImageSet, kinds: tuple[str, ...], seed: int
) -> LabeledImageSet:
    """Concatenate one corrupted copy of ``base`` per kind (seeded per kind)."""
    parts = []
    for offset, kind in enumerate(kinds):
        spec = CorruptionSpec(kind=kind, seed=seed + offset)
        parts.append(
            LabeledImageSet(
                images=apply_corruption(spec, base.images),
                digit_labels=base.digit_labels,
                corruptions=kind,
                origin=base.origin,
                source_indices=base.source_indices,
            )
        )
    return LabeledImageSet.concatenate(parts)


# ---------------------------------------------------------------------------
# experiment splits
# ---------------------------------------------------------------------------

def build_experiment1_splits(
    mnist_train: LabeledImageSet,
    mnist_test: LabeledImageSet,
    normal_digit: int = 3,
    outlier_digit: int = 8,
    seed: int = 0,
    strict_counts: bool = True,
) -> dict[str, LabeledImageSet]:
    """Domain-shift splits for the one-digit-normal benchmark.

    train/earlystop: normal-digit images from the train archive under the
    three training corruptions, shuffled and split 90/10. val: normal +
    outlier digits from the *test* archive under the three test-time
    corruptions. test: normal + outlier digits from the *train* archive
    under the test-time corruptions. Validation and test therefore share
    no underlying images.

    ``strict_counts`` checks the canonical archive counts per digit and
    raises on mismatch; pass False to warn and continue on subsets.
    """
    if normal_digit == outlier_digit:
        raise UsageError("normal and outlier digit must differ")

    def _take(src: LabeledImageSet, digit: int, canonical: dict[int, int]) -> LabeledImageSet:
        sel = src.subset(np.flatnonzero(src.digit_labels == digit))
        expected = canonical.get(digit)
        if expected is not None and len(sel) != expected:
            msg = (
                f"{src.origin}: digit {digit} has {len(sel)} images, canonical count is {expected}"
            )
            if strict_counts:
                raise DataFormatError(msg)
            logger.warning("%s (continuing: strict_counts=False)", msg)
        return sel

    normal_train = _take(mnist_train, normal_digit, CANONICAL_TRAIN_COUNTS)
    outlier_train = _take(mnist_train, outlier_digit, CANONICAL_TRAIN_COUNTS)
    normal_test = _take(mnist_test, normal_digit, CANONICAL_TEST_COUNTS)
    outlier_test = _take(mnist_test, outlier_digit, CANONICAL_TEST_COUNTS)

    train_pool = corrupt_set(normal_train, TRAIN_CORRUPTIONS, seed=seed)
    order = np.random.default_rng(seed).permutation(len(train_pool))
    cut = int(round(0.9 * len(train_pool)))
    train = train_pool.subset(order[:cut])
    earlystop = train_pool.subset(order[cut:])

    val = corrupt_set(
        LabeledImageSet.concatenate([normal_test, outlier_test]),
        TEST_CORRUPTIONS,
        seed=seed + 101,
    )
    test = corrupt_set(
        LabeledImageSet.concatenate([normal_train, outlier_train]),
        TEST_CORRUPTIONS,
        seed=seed + 202,
    )
    if mnist_train.origin == mnist_test.origin:
        raise UsageError("train and test archives must have distinct origins")
    return {"train": train, "earlystop": earlystop, "val": val, "test": test}


def binary_labels(s: LabeledImageSet, normal_digit: int) -> np.ndarray:
    """1 = anomalous (any non-normal digit), 0 = normal."""
    return (s.digit_labels != normal_digit).astype(np.int64)


# ---------------------------------------------------------------------------
# split caches on disk
# ---------------------------------------------------------------------------

def save_split_dir(directory: str | Path, splits: dict[str, LabeledImageSet]) -> dict:
    """Write each split as NPY arrays plus an index with content hashes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, s in splits.items():
        np.save(directory / f"{name}-images.npy", s.images)
        np.save(directory / f"{name}-labels.npy", s.digit_labels)
        np.save(directory / f"{name}-sources.npy", s.source_indices)
        (directory / f"{name}-corruptions.json").write_text(
            json.dumps([str(c) for c in s.corruptions])
        )
        index[name] = {"origin": s.origin, "n": len(s), "fingerprint": s.fingerprint()}
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return index


def load_split_dir(directory: str | Path) -> dict[str, LabeledImageSet]:
    """Read split caches back, verifying each recorded fingerprint."""
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise UsageError(f"no split index at {index_path} (run the corrupt step first)")
    index = json.loads(index_path.read_text())
    splits = {}
    for name, meta in index.items():
        try:
            images = np.load(directory / f"{name}-images.npy", allow_pickle=False)
            labels = np.load(directory / f"{name}-labels.npy", allow_pickle=False)
            sources = np.load(directory / f"{name}-sources.npy", allow_pickle=False)
            corruptions = json.loads((directory / f"{name}-corruptions.json").read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"split cache incomplete: {exc}") from exc
        s = LabeledImageSet(
            images=images,
            digit_labels=labels,
            corruptions=np.asarray(corruptions, dtype=object),
            origin=meta["origin"],
            source_indices=sources,
        )
        if s.fingerprint() != meta["fingerprint"]:
            raise DataFormatError(f"{name} split does not match its recorded fingerprint")
        splits[name] = s
    return splits


# ---------------------------------------------------------------------------
# synthetic 2D data for oracle-scale tests
# ---------------------------------------------------------------------------

def synth_gaussian_blobs(
    n_normal: int,
    n_outliers: int,
    seed: int = 0,
    centers: tuple[tuple[float, float], ...] = ((0.0, 0.0),),
    spread: float = 1.0,
    box: float = 8.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian clusters plus uniform box outliers, with 0/1 labels."""
    rng = np.random.default_rng(seed)
    per = [n_normal // len(centers)] * len(centers)
    per[0] += n_normal - sum(per)
    points = []
    for c, k in zip(centers, per):
        points.append(rng.normal(loc=c, scale=spread, size=(k, 2)))
    if n_outliers:
        points.append(rng.uniform(-box, box, size=(n_outliers, 2)))
    labels = np.concatenate([np.zeros(n_normal, dtype=np.int64), np.ones(n_outliers, dtype=np.int64)])
    return np.concatenate(points, axis=0), labels
