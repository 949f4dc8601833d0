"""Dataset ingestion, normalization, input encoding and batching.

Image datasets are read from IDX files (the MNIST / Fashion-MNIST distribution
format, optionally gzip-compressed) or from CIFAR binary records, normalized
with global training-split statistics and delivered to the network as constant
input currents. A small synthetic generator provides reproducible data for
tests and smoke runs.
"""

import gzip
import logging
import os
import struct
from collections.abc import Iterator
from dataclasses import dataclass, replace
from typing import IO, Literal

import numpy as np
from dotenv import load_dotenv

from src.core.dynamics import InputEncoding
from src.core.numerics import RngStream, Shape, Tensor

IDX_UNSIGNED_BYTE = 0x08
IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803
DATA_DIR_ENV = "EQSPIKE_DATA_DIR"
AUGMENT_STREAM = 1_000_000


# --- Types ---


@dataclass(frozen=True)
class NormalizationStats:
    """Global mean and standard deviation of a training split."""

    mean: float
    std: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.mean) and np.isfinite(self.std)) or self.std <= 0:
            raise ValueError(
                f"Invalid normalization statistics ({self.mean}, {self.std})."
            )


@dataclass
class Dataset:
    """Images (N, H, W, C) with integer class labels."""

    images: Tensor
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    stats: NormalizationStats | None = None

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            msg = f"Images must be (N, H, W, C), got {self.images.shape}."
            logging.error(msg)
            raise ValueError(msg)
        if self.images.shape[0] != self.labels.shape[0]:
            msg = f"{self.images.shape[0]} images but {self.labels.shape[0]} labels."
            logging.error(msg)
            raise ValueError(msg)
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            msg = f"Labels must lie in [0, {self.num_classes})."
            logging.error(msg)
            raise ValueError(msg)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Shape:
        return tuple(self.images.shape[1:])

    def subset(self, count: int) -> "Dataset":
        """The first `count` samples."""
        return replace(self, images=self.images[:count], labels=self.labels[:count])


# --- IDX files ---


def _open(path: str) -> IO[bytes]:
    if not os.path.exists(path):
        msg = f"Data file not found: {path}"
        logging.error(msg)
        raise FileNotFoundError(msg)
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx_bytes(path: str) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array."""
    with _open(path) as handle:
        raw = handle.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != IDX_UNSIGNED_BYTE:
        msg = f"Bad IDX magic in {path}: {raw[:4].hex()}"
        logging.error(msg)
        raise ValueError(msg)
    ndim = raw[3]
    header_size = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header_size:
        msg = f"Truncated IDX header in {path}."
        logging.error(msg)
        raise ValueError(msg)
    dims = struct.unpack(f">{ndim}I", raw[4:header_size])
    count = int(np.prod(dims))
    if len(raw) - header_size < count:
        msg = f"Truncated IDX payload in {path}: expected {count} bytes."
        logging.error(msg)
        raise ValueError(msg)
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_size)
    return data.reshape(dims)


def read_idx_shape(path: str) -> tuple[int, ...]:
    """Read only the dimensions from an IDX header."""
    with _open(path) as handle:
        head = handle.read(4)
        if len(head) < 4 or head[:3] != bytes([0, 0, IDX_UNSIGNED_BYTE]):
            msg = f"Bad IDX magic in {path}: {head.hex()}"
            logging.error(msg)
            raise ValueError(msg)
        dims = handle.read(4 * head[3])
    if len(dims) < 4 * head[3]:
        raise ValueError(f"Truncated IDX header in {path}.")
    return tuple(struct.unpack(f">{head[3]}I", dims))


def load_idx(path: str) -> Tensor:
    """Load an IDX tensor, scaled from bytes to [0, 1].

    Args:
        path (str): IDX file, gzip-compressed if it ends in '.gz'.

    Returns:
        Tensor: float64 array with the file's dimensions.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: On a bad magic number or a truncated payload.
    """
    return _read_idx_bytes(path).astype(np.float64) / 255.0


def load_idx_labels(path: str) -> np.ndarray:
    """Load an IDX label vector as int64 class indices."""
    data = _read_idx_bytes(path)
    if data.ndim != 1:
        msg = f"Label file {path} has {data.ndim} dimensions, expected 1."
        logging.error(msg)
        raise ValueError(msg)
    return data.astype(np.int64)


def save_idx(path: str, data: Tensor, scaled: bool = True) -> None:
    """Write an unsigned-byte IDX file (the inverse of `load_idx`).

    Args:
        path (str): Output path; '.gz' compresses.
        data (Tensor): Values in [0, 1] if `scaled`, else integers 0..255.
        scaled (bool): Whether to multiply by 255 before storing.
    """
    values = np.asarray(data, dtype=np.float64)
    payload = np.rint(values * 255.0 if scaled else values)
    if payload.min(initial=0) < 0 or payload.max(initial=0) > 255:
        raise ValueError("IDX byte payload must lie in [0, 255].")
    header = bytes([0, 0, IDX_UNSIGNED_BYTE, values.ndim])
    header += struct.pack(f">{values.ndim}I", *values.shape)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as handle:
        handle.write(header + payload.astype(np.uint8).tobytes())


# --- CIFAR binary records ---


def load_cifar_binary(
    path: str, num_classes: int = 10, split: str = "train"
) -> Dataset:
    """Load CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine bytes) records.

    CIFAR-100 uses the fine label.
    """
    label_bytes = 1 if num_classes == 10 else 2
    record = label_bytes + 3 * 32 * 32
    with _open(path) as handle:
        raw = np.frombuffer(handle.read(), dtype=np.uint8)
    if raw.size == 0 or raw.size % record:
        msg = f"{path} is not a whole number of {record}-byte CIFAR records."
        logging.error(msg)
        raise ValueError(msg)
    rows = raw.reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return Dataset(images.astype(np.float64), labels, num_classes, split)


# --- Paths ---


def resolve_data_path(path: str) -> str:
    """Return `path`, or its location under EQSPIKE_DATA_DIR if only that exists."""
    load_dotenv()
    if os.path.exists(path) or os.path.isabs(path):
        return path
    root = os.getenv(DATA_DIR_ENV)
    if root:
        candidate = os.path.join(root, path)
        if os.path.exists(candidate):
            return candidate
    return path


def load_dataset(
    images_path: str, labels_path: str, num_classes: int = 10, split: str = "train"
) -> Dataset:
    """Load an IDX image/label pair into a Dataset."""
    images = load_idx(resolve_data_path(images_path))
    labels = load_idx_labels(resolve_data_path(labels_path))
    if images.ndim == 3:
        images = images[..., np.newaxis]
    logging.info(f"Loaded {images.shape[0]} {split} samples from {images_path}.")
    return Dataset(images, labels, num_classes, split)


# --- Normalization and encoding ---


def fit_normalization(dataset: Dataset) -> NormalizationStats:
    """Global mean and standard deviation over every pixel of the split."""
    return NormalizationStats(float(dataset.images.mean()), float(dataset.images.std()))


def normalize(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    images = (dataset.images - stats.mean) / stats.std
    return replace(dataset, images=images, stats=stats)


def to_network_input(images: Tensor, input_shape: Shape) -> Tensor:
    """Convert (N, H, W, C) images to the network layout (flat or (C, H, W))."""
    if len(input_shape) == 1:
        return images.reshape(images.shape[0], -1)
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def encode_constant_current(image: Tensor, stats: NormalizationStats) -> InputEncoding:
    """Deliver (x − mean) / std identically at every time step."""
    x = (np.asarray(image, dtype=np.float64) - stats.mean) / stats.std
    return InputEncoding.constant(x)


def encode_bernoulli_spikes(x: Tensor, T: int, rng: RngStream) -> InputEncoding:
    """Binary spike train firing with probability clip(x, 0, 1) at each step."""
    probabilities = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    draws = rng.generator().random((T, *probabilities.shape))
    return InputEncoding.spike_train((draws < probabilities).astype(np.float64))


def augment_crop_flip(images: Tensor, rng: RngStream, pad: int = 4) -> Tensor:
    """Random crop after zero padding plus a random horizontal flip, per sample."""
    gen = rng.generator()
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    offsets = gen.integers(0, 2 * pad + 1, size=(n, 2))
    flips = gen.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, dy : dy + h, dx : dx + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


# --- Batching ---


class BatchIterator:
    """Deterministically shuffled mini-batches; each epoch is a permutation."""

    def __init__(
        self,
        dataset: Dataset,
        batch_size: int,
        seed: int = 0,
        shuffle: bool = True,
        augment: bool = False,
    ) -> None:
        if batch_size < 1:
            raise ValueError("Batch size must be at least 1.")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.augment = augment
        self.epoch = 0

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.dataset))
        return RngStream(self.seed, epoch).generator().permutation(len(self.dataset))

    def batches(
        self, epoch: int, start: int = 0
    ) -> Iterator[tuple[Tensor, np.ndarray]]:
        """Yield (images, labels) of an epoch, skipping the first `start` batches."""
        order = self.order(epoch)
        for b in range(start, len(self)):
            idx = order[b * self.batch_size : (b + 1) * self.batch_size]
            images = self.dataset.images[idx]
            if self.augment:
                stream = AUGMENT_STREAM + epoch * len(self) + b
                images = augment_crop_flip(images, RngStream(self.seed, stream))
            yield images, self.dataset.labels[idx]

    def __iter__(self) -> Iterator[tuple[Tensor, np.ndarray]]:
        yield from self.batches(self.epoch)
        self.epoch += 1


# --- Synthetic data ---


def synth_dataset(
    kind: Literal["blobs", "xor"],
    n: int,
    seed: int = 0,
    num_classes: int = 2,
    dim: int = 2,
    separation: float = 5.0,
) -> Dataset:
    """Reproducible labelled point clouds shaped as (n, 1, 1, dim) images.

    'blobs' places unit-variance Gaussian clusters whose centres are
    `separation` apart; 'xor' uses the four corners of the unit square with
    labels (0, 1, 1, 0), jittered when n > 4.
    """
    if n < 2:
        raise ValueError("A synthetic dataset needs at least two samples.")
    gen = RngStream(seed).generator()
    if kind == "blobs":
        dim = max(dim, num_classes)
        labels = np.arange(n) % num_classes
        centers = np.eye(num_classes, dim) * separation / np.sqrt(2.0)
        points = centers[labels] + gen.standard_normal((n, dim))
    elif kind == "xor":
        corners = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        labels = np.array([0, 1, 1, 0])[np.arange(n) % 4]
        points = corners[np.arange(n) % 4]
        if n > 4:
            points = points + 0.1 * gen.standard_normal(points.shape)
        num_classes = 2
    else:
        msg = f"Unknown synthetic dataset '{kind}'."
        logging.error(msg)
        raise ValueError(msg)
    images = points.reshape(n, 1, 1, -1)
    return Dataset(images, labels, num_classes, split=f"synth-{kind}")
