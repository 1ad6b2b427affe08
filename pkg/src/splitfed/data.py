"""Datasets: a seeded Gaussian-blob generator and IDX (MNIST-layout) files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    def __init__(self, path: str | Path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    tag: str = "train"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if y.ndim != 1:
            raise DataError(f"labels must be a vector, got shape {y.shape}")
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if self.num_classes < 1:
            raise DataError(f"num_classes must be >= 1, got {self.num_classes}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, idx: np.ndarray, tag: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, tag or self.tag)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def synth_blobs(n: int, k: int, dim: int, seed: int, separation: float = 6.0, sigma: float = 1.0) -> Dataset:
    """``k`` isotropic Gaussian clusters with balanced classes.

    Class means sit on a regular k-gon in the first two coordinates (first
    coordinate only when ``dim == 1``) so neighbouring means are
    ``separation * sigma`` apart. Class ``c`` gets ``n // k`` points plus one
    of the remainder if ``c < n % k``; rows are shuffled.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    if n < k:
        raise DataError(f"need n >= k, got n={n}, k={k}")
    if dim < 1:
        raise DataError(f"dim must be >= 1, got {dim}")
    gap = separation * sigma
    means = np.zeros((k, dim))
    if dim == 1:
        means[:, 0] = gap * np.arange(k)
    else:
        radius = gap / (2.0 * math.sin(math.pi / k))
        angle = 2.0 * math.pi * np.arange(k) / k
        means[:, 0] = radius * np.cos(angle)
        means[:, 1] = radius * np.sin(angle)
    base, extra = divmod(n, k)
    labels = np.concatenate([np.full(base + (1 if c < extra else 0), c) for c in range(k)])
    rng = substream(seed, "data", "blobs")
    labels = labels[rng.permutation(n)]
    x = means[labels] + sigma * rng.standard_normal((n, dim))
    return Dataset(x, labels, k)


def synth_images(n: int, k: int, side: int, seed: int, noise: float = 0.3) -> Dataset:
    """Single-channel ``side x side`` images in [0, 1]: a fixed random template per class plus pixel noise.

    Templates are sparse bright strokes (each pixel lit with probability
    0.2); classes are balanced and rows shuffled.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    if n < k:
        raise DataError(f"need n >= k, got n={n}, k={k}")
    if side < 1:
        raise DataError(f"side must be >= 1, got {side}")
    rng = substream(seed, "data", "images")
    templates = (rng.random((k, side, side)) < 0.2).astype(np.float64)
    base, extra = divmod(n, k)
    labels = np.concatenate([np.full(base + (1 if c < extra else 0), c) for c in range(k)])
    labels = labels[rng.permutation(n)]
    x = np.clip(templates[labels] + noise * rng.standard_normal((n, side, side)), 0.0, 1.0)
    return Dataset(x[:, None], labels, k)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint shuffled train/test subsets."""
    if not 0 < test_fraction < 1:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    perm = substream(seed, "data", "split").permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    return ds.subset(np.sort(perm[n_test:]), "train"), ds.subset(np.sort(perm[:n_test]), "test")


def iid_shards(ds: Dataset, num_clients: int, seed: int, sizes: list[int] | None = None) -> list[Dataset]:
    """Uniformly random disjoint client shards.

    Equal sizes by default (the remainder is dropped so every client holds
    the same number of samples); ``sizes`` sets them explicitly.
    """
    if num_clients < 1:
        raise DataError(f"num_clients must be >= 1, got {num_clients}")
    if sizes is None:
        each = len(ds) // num_clients
        if each == 0:
            raise DataError(f"{len(ds)} samples cannot fill {num_clients} shards")
        sizes = [each] * num_clients
    if len(sizes) != num_clients or any(s < 1 for s in sizes) or sum(sizes) > len(ds):
        raise DataError(f"invalid shard sizes {sizes} for {len(ds)} samples and {num_clients} clients")
    perm = substream(seed, "data", "shards").permutation(len(ds))
    out, pos = [], 0
    for s in sizes:
        out.append(ds.subset(np.sort(perm[pos : pos + s])))
        pos += s
    return out


# ---------------------------------------------------------------------------
# IDX files


def _read_header(path: Path, raw: bytes, magic: int, ndim: int) -> tuple[int, ...]:
    if len(raw) < 4:
        raise IdxFormatError(path, len(raw), "file too short for the magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IdxFormatError(path, len(raw), f"truncated header, expected {end} bytes")
    return struct.unpack(f">{ndim}I", raw[4:end])


def read_idx(images_path: str | Path, labels_path: str | Path, num_classes: int = 10, tag: str = "train") -> Dataset:
    """Images scaled to [0, 1] with their labels."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw_x = images_path.read_bytes()
    raw_y = labels_path.read_bytes()
    n, rows, cols = _read_header(images_path, raw_x, IDX_IMAGES_MAGIC, 3)
    (n_labels,) = _read_header(labels_path, raw_y, IDX_LABELS_MAGIC, 1)
    need_x = 16 + n * rows * cols
    if len(raw_x) < need_x:
        raise IdxFormatError(images_path, len(raw_x), f"truncated pixel data, expected {need_x} bytes")
    if len(raw_y) < 8 + n_labels:
        raise IdxFormatError(labels_path, len(raw_y), f"truncated label data, expected {8 + n_labels} bytes")
    if n != n_labels:
        raise DataError(f"{images_path} holds {n} images but {labels_path} holds {n_labels} labels")
    pixels = np.frombuffer(raw_x, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(raw_y, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise IdxFormatError(labels_path, 8 + bad, f"label {labels[bad]} >= num_classes {num_classes}")
    x = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    return Dataset(x, labels, num_classes, tag)


def quantize(features: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to the byte values an IDX file stores."""
    return np.clip(np.rint(np.asarray(features) * 255.0), 0, 255).astype(np.uint8)


def write_idx(ds: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write images (``[n, rows, cols]`` or ``[n, 1, rows, cols]``, values in [0, 1]) and labels."""
    x = ds.features
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 3:
        raise DataError(f"IDX images need shape [n, rows, cols], got {ds.features.shape}")
    if ds.num_classes > 256:
        raise DataError("IDX labels are single bytes")
    n, rows, cols = x.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + quantize(x).tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())
