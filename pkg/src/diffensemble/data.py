"""Dataset ingestion: CIFAR-10 binary batches, grayscale conversion,
deterministic splits, augmentation, and a synthetic fixture generator that
writes the same binary layout for tests and offline runs.

The test split carries a tamper-evident access audit: every consumer that
touches a split is recorded, so a pipeline run can prove the test images were
never read before final reporting.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"
RECORD_BYTES = 1 + 3 * 1024
RECORDS_PER_FILE = 10000
VALIDATION_SIZE = 5000

# ITU-R 601 luma weights, matching the cited framework conversion.
LUMA_WEIGHTS = (0.2989, 0.5870, 0.1140)


class DataError(ValueError):
    """Missing, truncated, or corrupt dataset file."""


@dataclass
class Dataset:
    """Immutable labeled image collection: (N, 32, 32) grayscale in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must align")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


class SplitAudit:
    """Append-only, hash-chained log of split accesses."""

    def __init__(self):
        self._log: list[tuple[str, str]] = []
        self._digest = hashlib.sha256(b"split-audit-v1").hexdigest()

    def record(self, split: str, consumer: str) -> None:
        self._log.append((split, consumer))
        self._digest = hashlib.sha256(
            (self._digest + split + ":" + consumer).encode()
        ).hexdigest()

    @property
    def entries(self) -> tuple[tuple[str, str], ...]:
        return tuple(self._log)

    @property
    def digest(self) -> str:
        return self._digest

    def test_consumers(self) -> set[str]:
        return {c for s, c in self._log if s == "test"}

    def verify_test_isolation(self, allowed: set[str] = frozenset({"report"})) -> bool:
        """True iff the test split was only ever consumed by ``allowed``."""
        return self.test_consumers() <= set(allowed)


@dataclass
class DataSplits:
    """Train / validation / test partition with an access audit.

    Use :meth:`take` to obtain a split so the consumer is logged.
    """

    train: Dataset
    validation: Dataset
    test: Dataset
    audit: SplitAudit = field(default_factory=SplitAudit)

    def take(self, split: str, consumer: str) -> Dataset:
        if split not in ("train", "validation", "test"):
            raise ValueError(f"unknown split {split!r}")
        self.audit.record(split, consumer)
        return getattr(self, split)


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luma-weighted grayscale of channel-last RGB in [0, 1]."""
    w = np.asarray(LUMA_WEIGHTS)
    return np.clip(rgb @ w, 0.0, 1.0)


def flip_left_right(image: np.ndarray) -> np.ndarray:
    """Reverse column order; higher-rank inputs flip the last axis."""
    return image[..., ::-1]


def _read_batch_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise DataError(f"missing dataset file: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if len(raw) != RECORD_BYTES * RECORDS_PER_FILE:
        raise DataError(
            f"short or oversized dataset file: {path} ({len(raw)} bytes, "
            f"expected {RECORD_BYTES * RECORDS_PER_FILE})"
        )
    rec = raw.reshape(RECORDS_PER_FILE, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"corrupt record in {path}: label byte > 9")
    planes = rec[:, 1:].reshape(RECORDS_PER_FILE, 3, 32, 32)
    rgb = np.transpose(planes, (0, 2, 3, 1)).astype(np.float64) / 255.0
    return to_grayscale(rgb), labels


def load_cifar10(directory: str | Path) -> DataSplits:
    """Load the six standard CIFAR-10 binary batch files.

    Training-origin records 0..44999 become the train split and the last
    5000 (in file order) the validation split; the test file is the test
    split. Deterministic across runs and platforms.
    """
    directory = Path(directory)
    images, labels = [], []
    for name in TRAIN_FILES:
        g, l = _read_batch_file(directory / name)
        images.append(g)
        labels.append(l)
    train_images = np.concatenate(images)
    train_labels = np.concatenate(labels)
    test_images, test_labels = _read_batch_file(directory / TEST_FILE)
    cut = len(train_images) - VALIDATION_SIZE
    return DataSplits(
        train=Dataset(train_images[:cut], train_labels[:cut]),
        validation=Dataset(train_images[cut:], train_labels[cut:]),
        test=Dataset(test_images, test_labels),
    )


def split_manifest(splits: DataSplits) -> dict:
    """Sizes and content hashes of every split, for reproducibility checks."""

    def digest(ds: Dataset) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(ds.images).tobytes())
        h.update(np.ascontiguousarray(ds.labels).tobytes())
        return h.hexdigest()

    return {
        name: {"size": len(ds), "sha256": digest(ds)}
        for name, ds in (
            ("train", splits.train),
            ("validation", splits.validation),
            ("test", splits.test),
        )
    }


# ---------------------------------------------------------------------------
# Synthetic stand-in dataset, written in the exact CIFAR-10 binary layout.


def _class_templates(rng: np.random.Generator) -> np.ndarray:
    """Ten 32x32 class signatures, deliberately left-right symmetric so the
    flip augmentation does not alias one class into another.

    Each class combines horizontal bands of a class-specific spatial period
    with a bright stripe at a class-specific row.
    """
    i, _ = np.mgrid[0:32, 0:32]
    templates = np.zeros((10, 32, 32))
    for c in range(10):
        period = 2.5 + 0.9 * c
        bands = 0.5 * (1 + np.cos(2 * np.pi * i / period))
        row = 3 + 2.9 * ((c * 7) % 10)
        stripe = np.exp(-(((i - row) / 2.5) ** 2))
        templates[c] = 0.55 * bands + 0.85 * stripe
    return templates


def synthetic_records(
    n: int, seed: int, noise: float = 0.22
) -> tuple[np.ndarray, np.ndarray]:
    """Generate ``n`` synthetic grayscale-as-RGB images with class structure.

    Returns (uint8 images (n, 3, 32, 32) plane-major, labels (n,)). Each
    image blends the true class signature with a random distractor class,
    then receives one of three corruption kinds before contrast scaling and
    pixel noise: a spatial shift, a Fourier phase jitter, or none. The
    corruption kinds stress different feature families, so classifiers with
    different front-ends fail on different images. That error diversity is
    what makes score averaging across a pool of classifiers productive.
    """
    rng = np.random.default_rng(seed)
    templates = _class_templates(np.random.default_rng(20240101))
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, 32, 32))
    for idx, c in enumerate(labels):
        distractor = (c + rng.integers(1, 10)) % 10
        img = 0.5 * templates[c] + 0.6 * rng.uniform(0, 1) * templates[distractor]
        kind = rng.integers(0, 3)
        if kind == 0:
            img = np.roll(img, rng.integers(-2, 3), axis=0)
            img = np.roll(img, rng.integers(-2, 3), axis=1)
        elif kind == 1:
            f = np.fft.rfft2(img)
            phase = np.exp(1j * 0.9 * rng.normal(size=f.shape))
            img = np.abs(np.fft.irfft2(f * phase, s=img.shape))
        if rng.random() < 0.5:
            img = img[:, ::-1]
        img = rng.uniform(0.4, 1.0) * img + noise * rng.normal(size=(32, 32))
        images[idx] = np.clip(img, 0.0, 1.0)
    bytes_img = np.round(images * 255).astype(np.uint8)
    planes = np.repeat(bytes_img[:, None, :, :], 3, axis=1)  # equal RGB channels
    return planes, labels


def write_synthetic_dataset(directory: str | Path, seed: int = 0) -> None:
    """Write a full synthetic dataset in the standard six-file binary layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(TRAIN_FILES + [TEST_FILE]):
        planes, labels = synthetic_records(RECORDS_PER_FILE, seed=seed * 7 + i)
        rec = np.empty((RECORDS_PER_FILE, RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = labels
        rec[:, 1:] = planes.reshape(RECORDS_PER_FILE, -1)
        (directory / name).write_bytes(rec.tobytes())


def write_fixture_dataset(directory: str | Path, seed: int = 0) -> None:
    """Small 600-record fixture in the same record layout (100 per file).

    Loadable with :func:`load_fixture`; the full loader refuses these files
    because they are intentionally short.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(TRAIN_FILES + [TEST_FILE]):
        planes, labels = synthetic_records(100, seed=seed * 11 + i)
        rec = np.empty((100, RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = labels
        rec[:, 1:] = planes.reshape(100, -1)
        (directory / name).write_bytes(rec.tobytes())


def synthetic_splits(
    n_train: int, n_validation: int, n_test: int, seed: int = 0
) -> DataSplits:
    """In-memory synthetic splits without touching disk."""
    planes, labels = synthetic_records(n_train + n_validation + n_test, seed=seed)
    rgb = np.transpose(planes, (0, 2, 3, 1)).astype(np.float64) / 255.0
    gray = to_grayscale(rgb)
    a, b = n_train, n_train + n_validation
    return DataSplits(
        train=Dataset(gray[:a], labels[:a]),
        validation=Dataset(gray[a:b], labels[a:b]),
        test=Dataset(gray[b:], labels[b:]),
    )
