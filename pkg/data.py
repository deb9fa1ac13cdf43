"""
Datasets: IDX ingestion, synthetic class blobs, normalization, augmentation
and deterministic batching.

IDX layout (big-endian): u32 magic 0x000008NN (NN = number of dims), NN u32
dimension sizes, then the raw unsigned bytes in row-major order. Image files
carry 3 dims (N, rows, cols), label files 1 dim (N).
"""

import gzip
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (ContractError, DatasetError, EmptyDatasetError, IdxCountMismatchError, IdxMagicError,
                    IdxTruncatedError, RangeError, ZeroVarianceError)
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "test")

SeedLike = Union[int, Sequence[int], None]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel mean and standard deviation (one entry for single-channel data)."""
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, record: dict) -> "NormalizationStats":
        return cls(tuple(float(v) for v in record["mean"]), tuple(float(v) for v in record["std"]))


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    stats: Optional[NormalizationStats] = None

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32).view()
        images.flags.writeable = False
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).view()
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

        if images.ndim != 4:
            raise DatasetError(f"images must be N×C×H×W, got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if self.num_classes < 1:
            raise DatasetError(f"num_classes must be >= 1, got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes}), "
                               f"found [{labels.min()}, {labels.max()}]")
        if self.split not in SPLITS:
            raise DatasetError(f"split must be one of {SPLITS}, got '{self.split}'")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ContractError("a batch needs at least one sample")
        if self.images.shape[0] != len(self.labels):
            raise ContractError(f"{self.images.shape[0]} images but {len(self.labels)} labels in batch")

    def __len__(self) -> int:
        return len(self.labels)


# ═══════════════════════════════════════════════════════════════════════════════
# IDX FILES
# ═══════════════════════════════════════════════════════════════════════════════

def _open(path: Path, mode: str):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def _read_idx(path: Union[str, Path], expected_magic: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"IDX file not found: {path}")
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except (OSError, EOFError) as e:
        raise IdxTruncatedError(f"{path}: cannot read ({e})")

    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: {len(raw)} bytes, too short for a header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")

    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    if len(raw) - header > count:
        logger.warning("%s: ignoring %d trailing bytes", path, len(raw) - header - count)
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    return dims, payload


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             num_classes: Optional[int] = None, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (label_count,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if count != label_count:
        raise IdxCountMismatchError(f"{images_path} has {count} images but {labels_path} has {label_count} labels")

    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    images = pixels.reshape(count, 1, rows, cols).astype(np.float32) / np.float32(255.0)
    logger.info("loaded %d %s images of %d×%d from %s", count, split, rows, cols, images_path)
    return Dataset(images, labels, num_classes, split=split)


def save_idx(dataset: Dataset, images_path: Union[str, Path], labels_path: Union[str, Path]) -> None:
    """Write a single-channel dataset as an IDX pair; pixels are re-quantized to bytes."""
    n, channels, rows, cols = dataset.images.shape
    if channels != 1:
        raise DatasetError(f"IDX image files hold one channel, dataset has {channels}")
    if dataset.num_classes > 256:
        raise DatasetError(f"IDX label bytes cannot hold {dataset.num_classes} classes")
    pixels = np.clip(np.rint(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)

    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with _open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ═══════════════════════════════════════════════════════════════════════════════
# SYNTHETIC DATA
# ═══════════════════════════════════════════════════════════════════════════════

def synthetic_gaussians(num_classes: int, samples_per_class: int, image_size: int = 16,
                        seed: SeedLike = 0, noise: float = 0.05, split: str = "train") -> Dataset:
    """
    One Gaussian blob per class, placed on a circle around the image center.

    Class k has its own position and amplitude 0.4 + 0.6·(k+1)/K, so the
    classes stay apart both spatially and in mean intensity.
    """
    if num_classes < 1 or samples_per_class < 1 or image_size < 2:
        raise DatasetError(f"synthetic data needs positive sizes, got classes={num_classes}, "
                           f"per_class={samples_per_class}, size={image_size}")
    rng = np.random.default_rng(seed)
    grid = np.arange(image_size, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    center = (image_size - 1) / 2.0
    radius = image_size / 4.0
    sigma = image_size / 8.0

    images, labels = [], []
    for k in range(num_classes):
        angle = 2.0 * np.pi * k / num_classes
        cy, cx = center + radius * np.sin(angle), center + radius * np.cos(angle)
        amplitude = 0.4 + 0.6 * (k + 1) / num_classes
        blob = amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
        samples = blob[None] + rng.normal(0.0, noise, size=(samples_per_class, image_size, image_size))
        images.append(np.clip(samples, 0.0, 1.0))
        labels.append(np.full(samples_per_class, k, dtype=np.int64))

    images = np.concatenate(images)[:, None]
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], num_classes, split=split)


# ═══════════════════════════════════════════════════════════════════════════════
# NORMALIZATION
# ═══════════════════════════════════════════════════════════════════════════════

def compute_stats(dataset: Dataset) -> NormalizationStats:
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot compute normalization statistics of an empty dataset")
    pixels = dataset.images.astype(np.float64)
    mean = pixels.mean(axis=(0, 2, 3))
    std = pixels.std(axis=(0, 2, 3))
    if np.any(std <= 0.0):
        raise ZeroVarianceError(f"constant dataset: per-channel std {std.tolist()}")
    return NormalizationStats(tuple(mean.tolist()), tuple(std.tolist()))


def normalize(dataset: Dataset, stats: Optional[NormalizationStats] = None) -> Dataset:
    """
    Standardize pixels. Statistics are computed on the train split only; the
    test split must be given the train split's `stats`.
    """
    if stats is None:
        if dataset.split != "train":
            raise DatasetError(f"the {dataset.split} split must reuse the train split's statistics")
        stats = compute_stats(dataset)
    if len(stats.mean) != dataset.images.shape[1]:
        raise DatasetError(f"statistics for {len(stats.mean)} channels, dataset has {dataset.images.shape[1]}")
    mean = np.asarray(stats.mean).reshape(1, -1, 1, 1)
    std = np.asarray(stats.std).reshape(1, -1, 1, 1)
    images = ((dataset.images.astype(np.float64) - mean) / std).astype(np.float32)
    return replace(dataset, images=images, stats=stats)


# ═══════════════════════════════════════════════════════════════════════════════
# AUGMENTATION AND BATCHING
# ═══════════════════════════════════════════════════════════════════════════════

def draw_crop_offsets(rng: np.random.Generator, count: int, pad: int) -> np.ndarray:
    """count×2 (dy, dx) offsets, uniform over {0..2·pad}²."""
    return rng.integers(0, 2 * pad + 1, size=(count, 2))


def augment(batch: Batch, pad: int, flip_prob: float, rng: np.random.Generator) -> Batch:
    """Zero-pad, random-crop back to size, then flip horizontally with probability `flip_prob`."""
    if pad < 0:
        raise RangeError(f"augment: pad must be >= 0, got {pad}")
    if not 0.0 <= flip_prob <= 1.0:
        raise RangeError(f"augment: flip_prob must lie in [0, 1], got {flip_prob}")

    images = batch.images.data
    size = len(batch)
    height, width = images.shape[2], images.shape[3]
    offsets = draw_crop_offsets(rng, size, pad)
    flips = rng.random(size) < flip_prob

    if pad:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.empty_like(images)
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + height, dx:dx + width]
    else:
        out = images.copy()
    out[flips] = out[flips, :, :, ::-1]
    return Batch(Tensor(out, dtype=images.dtype), batch.labels.copy(), batch.indices)


def batch_indices(count: int, batch_size: int, shuffle: bool = False, seed: SeedLike = 0,
                  min_size: int = 1) -> List[np.ndarray]:
    """Index chunks of `batch_size`; chunks shorter than `min_size` are dropped."""
    if batch_size < 1:
        raise RangeError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(count) if shuffle else np.arange(count)
    chunks = [order[start:start + batch_size] for start in range(0, count, batch_size)]
    dropped = [c for c in chunks if len(c) < min_size]
    if dropped:
        logger.debug("dropping %d batch(es) smaller than %d", len(dropped), min_size)
    return [c for c in chunks if len(c) >= min_size]


def make_batch(dataset: Dataset, indices: np.ndarray) -> Batch:
    """Copy the selected samples into a Batch."""
    return Batch(Tensor(dataset.images[indices]), dataset.labels[indices].copy(), np.asarray(indices))


def batches(dataset: Dataset, batch_size: int, shuffle: bool = False, seed: SeedLike = 0,
            min_size: int = 1) -> Iterator[Batch]:
    """Each sample exactly once per pass; a seeded permutation when `shuffle`."""
    for indices in batch_indices(len(dataset), batch_size, shuffle, seed, min_size):
        yield make_batch(dataset, indices)
