"""Datasets: IDX (MNIST) loading and writing, splits, synthetic blobs."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
# IDX type code 0x0E = float64; used for lossless adversarial corpora
IMAGES_F64_MAGIC = 0x00000E03

DATA_DIR_ENV = "A2D_DATA_DIR"
DEFAULT_DATA_DIR = Path("~/.cache/a2d/mnist")

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    pixels: np.ndarray
    label: int


@dataclass
class Dataset:
    """Images as an (n, input_dim) float64 array in [0, 1] plus labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Example:
        return Example(self.images[i], int(self.labels[i]))

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx, name=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_images(raw: bytes, path) -> np.ndarray:
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic == IMAGES_MAGIC:
        width, dtype, scale = 1, np.uint8, 255.0
    elif magic == IMAGES_F64_MAGIC:
        width, dtype, scale = 8, ">f8", 1.0
    else:
        raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    need = 16 + n * rows * cols * width
    if len(raw) != need:
        raise IdxFormatError(f"{path}: expected {need} bytes for {n} images, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=dtype, offset=16).reshape(n, rows * cols)
    return pixels.astype(np.float64) / scale


def _parse_labels(raw: bytes, path) -> np.ndarray:
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABELS_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if len(raw) != 8 + n:
        raise IdxFormatError(f"{path}: expected {8 + n} bytes for {n} labels, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "") -> Dataset:
    """Load an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_images(_read(images_path), images_path)
    labels = _parse_labels(_read(labels_path), labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images, labels, num_classes, name or Path(images_path).name)


def load_idx_images(path) -> np.ndarray:
    """Images only, as an (n, rows*cols) array in [0, 1]."""
    return _parse_images(_read(path), path)


def write_idx(dataset: Dataset, images_path, labels_path, side: int | None = None, lossless: bool = False) -> None:
    """Write a dataset as IDX. `lossless` stores float64 pixels instead of bytes."""
    n, d = dataset.images.shape
    side = side or int(round(np.sqrt(d)))
    rows, cols = (side, d // side) if side * (d // side) == d else (1, d)
    if lossless:
        body = dataset.images.astype(">f8").tobytes()
        header = struct.pack(">IIII", IMAGES_F64_MAGIC, n, rows, cols)
    else:
        body = np.round(dataset.images * 255.0).astype(np.uint8).tobytes()
        header = struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols)
    Path(images_path).write_bytes(header + body)
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def data_dir(override=None) -> Path:
    if override:
        return Path(override).expanduser()
    return Path(os.environ.get(DATA_DIR_ENV, DEFAULT_DATA_DIR)).expanduser()


def find_mnist(split: str = "train", directory=None):
    """Paths of the MNIST IDX pair for `split`, or None when absent."""
    root = data_dir(directory)
    images, labels = MNIST_FILES[split]
    for suffix in ("", ".gz"):
        ip, lp = root / (images + suffix), root / (labels + suffix)
        if ip.exists() and lp.exists():
            return ip, lp
    return None


def load_mnist(split: str = "train", directory=None) -> Dataset:
    found = find_mnist(split, directory)
    if found is None:
        raise FileNotFoundError(
            f"MNIST {split} files not found under {data_dir(directory)}; "
            f"set {DATA_DIR_ENV} or pass --data-dir"
        )
    return load_idx(*found, name=f"mnist-{split}")


def split_indices(n: int, train_n: int, test_n: int, seed: int = 0) -> tuple:
    """Sorted, disjoint index arrays of sizes train_n and test_n drawn from range(n)."""
    if train_n < 0 or test_n < 0:
        raise ValueError("split sizes must be nonnegative")
    if train_n + test_n > n:
        raise ValueError(f"cannot take {train_n}+{test_n} examples from {n}")
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[:train_n]), np.sort(order[train_n:train_n + test_n])


def split(data: Dataset, train_n: int, test_n: int, seed: int = 0) -> tuple:
    """Disjoint seeded random split into (train, test)."""
    a, b = split_indices(len(data), train_n, test_n, seed)
    return data.subset(a, f"{data.name}-train"), data.subset(b, f"{data.name}-test")


def blob_centers(num_classes: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0]).uniform(0.2, 0.8, size=(num_classes, dim))


def synthetic_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int = 0) -> Dataset:
    """Gaussian blobs around seeded centers in [0.2, 0.8]^dim, clipped to [0, 1]."""
    if num_classes < 1 or per_class < 1 or dim < 1 or spread < 0:
        raise ValueError("num_classes, per_class and dim must be positive; spread nonnegative")
    centers = blob_centers(num_classes, dim, seed)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(num_classes), per_class)
    images = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes, f"blobs-{num_classes}x{per_class}")
