"""Dataset loading, synthetic datasets and deterministic batching."""

from __future__ import annotations

import gzip
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import DataError, FormatError

MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_RECORD = 3073
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w] float64
    labels: np.ndarray  # [n] int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be rank 4 [n, c, h, w], got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split)

    def head(self, n: int) -> "Dataset":
        return self if n <= 0 or n >= len(self) else self.subset(np.arange(n))


# --------------------------------------------------------------------------
# IDX


def _read_bytes(path: Path) -> bytes:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            raw = candidate.read_bytes()
            return gzip.decompress(raw) if candidate.suffix == ".gz" else raw
    raise DataError(f"missing data file {path}")


def parse_idx(buf: bytes, expected_magic: int, what: str) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an integer array."""
    if len(buf) < 4:
        raise FormatError(f"{what}: truncated header", offset=len(buf))
    magic = int.from_bytes(buf[:4], "big")
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{what}: truncated dimension list", offset=len(buf))
    dims = [int.from_bytes(buf[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    size = int(np.prod(dims))
    if len(buf) < header + size:
        raise FormatError(f"{what}: expected {size} data bytes, file ends early", offset=len(buf))
    if len(buf) > header + size:
        raise FormatError(f"{what}: {len(buf) - header - size} trailing bytes", offset=header + size)
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=header).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx` for uint8 arrays of rank 1 or 3."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    head = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    return head + array.tobytes()


def write_mnist_idx(directory, split: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write raw pixel bytes [n, 28, 28] and labels as the two IDX files of ``split``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_name, lab_name = MNIST_FILES[split]
    (directory / img_name).write_bytes(encode_idx(images))
    (directory / lab_name).write_bytes(encode_idx(labels))


def write_mnist_subset(directory, train_per_class: int = 400, test_per_class: int = 100, seed: int = 0) -> Path:
    """Write a class-balanced MNIST subset as IDX files, drawn from mlxtend's bundled 5000 digits.

    Needs the optional ``mlxtend`` package; only used when the full MNIST
    files are not at hand.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError:
        raise DataError("write_mnist_subset needs the optional mlxtend package (pip install mlxtend)") from None
    x, y = mnist_data()
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        if idx.size < train_per_class + test_per_class:
            raise DataError(f"class {c} has only {idx.size} samples")
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:train_per_class + test_per_class])
    for split, parts in (("train", train_idx), ("test", test_idx)):
        sel = rng.permutation(np.concatenate(parts))
        write_mnist_idx(directory, split, x[sel].reshape(-1, 28, 28), y[sel])
    return Path(directory)


def _load_mnist_split(directory: Path, split: str) -> Dataset:
    img_name, lab_name = MNIST_FILES[split]
    pixels = parse_idx(_read_bytes(directory / img_name), IDX_IMAGES_MAGIC, img_name)
    labels = parse_idx(_read_bytes(directory / lab_name), IDX_LABELS_MAGIC, lab_name)
    if pixels.ndim != 3:
        raise FormatError(f"{img_name}: expected 3 dimensions, found {pixels.ndim}", offset=3)
    if labels.ndim != 1:
        raise FormatError(f"{lab_name}: expected 1 dimension, found {labels.ndim}", offset=3)
    if pixels.shape[0] != labels.shape[0]:
        raise FormatError(f"{img_name} has {pixels.shape[0]} images but {lab_name} has {labels.shape[0]} labels",
                          offset=4)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{lab_name}: label {labels.max()} outside 0..9", offset=8 + int(np.argmax(labels > 9)))
    x = (pixels.astype(np.float64) / 255.0 - MNIST_MEAN) / MNIST_STD
    return Dataset(x[:, None, :, :], labels.astype(np.int64), 10, split)


def load_mnist_idx(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    return _load_mnist_split(directory, "train"), _load_mnist_split(directory, "test")


# --------------------------------------------------------------------------
# CIFAR-10


def _parse_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise DataError(f"missing data file {path}")
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path.name}: length {len(raw)} is not a multiple of {CIFAR_RECORD}",
                          offset=len(raw) - len(raw) % CIFAR_RECORD)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path.name}: label {labels[bad]} outside 0..9", offset=bad * CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _cifar_split(directory: Path, names, split) -> Dataset:
    parts = [_parse_cifar_file(directory / n) for n in names]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    x = (pixels.astype(np.float64) / 255.0 - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]
    return Dataset(x, labels, 10, split)


def load_cifar10_bin(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    if not (directory / CIFAR_TRAIN[0]).exists() and (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    return _cifar_split(directory, CIFAR_TRAIN, "train"), _cifar_split(directory, CIFAR_TEST, "test")


# --------------------------------------------------------------------------
# synthetic


def _render(points: np.ndarray, size: int = 8, width: float = 0.35) -> np.ndarray:
    """Draw each 2-D point in [-1, 1]^2 as a Gaussian bump on a size x size grid."""
    grid = np.linspace(-1.0, 1.0, size)
    dx = points[:, 0, None] - grid[None, :]
    dy = points[:, 1, None] - grid[None, :]
    gx = np.exp(-dx ** 2 / (2 * width ** 2))
    gy = np.exp(-dy ** 2 / (2 * width ** 2))
    return (gy[:, :, None] * gx[:, None, :])[:, None, :, :]


def make_synthetic(kind: str, n: int, classes: int, seed: int, size: int = 8) -> Dataset:
    """Balanced 2-D point clouds rendered as single-channel ``size x size`` images."""
    if n < classes:
        raise DataError(f"need at least one sample per class: n={n} < classes={classes}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    labels = np.arange(n) % classes
    if kind == "blobs":
        angles = 2 * np.pi * np.arange(classes) / classes
        centers = 0.6 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        points = centers[labels] + 0.08 * rng.standard_normal((n, 2))
    elif kind == "spirals":
        r = rng.uniform(0.1, 1.0, n)
        theta = 3.0 * r + 2 * np.pi * labels / classes + 0.15 * rng.standard_normal(n)
        points = 0.9 * np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    else:
        raise DataError(f"unknown synthetic dataset {kind!r}; expected 'blobs' or 'spirals'")
    order = rng.permutation(n)
    return Dataset(_render(points[order], size), labels[order], classes, "train")


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray


def epoch_order(n: int, shuffle_seed: Optional[int]) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng(shuffle_seed).permutation(n)


def batches(ds: Dataset, batch_size: int, shuffle_seed=None, flip_seed=None, start: int = 0) -> Iterator[Batch]:
    """Yield batches in a deterministic order; the last short batch is kept.

    ``shuffle_seed=None`` keeps dataset order. ``flip_seed`` enables random
    horizontal flips, drawn per batch from its own stream. ``start`` skips
    that many leading batches (used when resuming mid-epoch).
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be at least 1, got {batch_size}")
    order = epoch_order(len(ds), shuffle_seed)
    flip_rng = np.random.default_rng(flip_seed) if flip_seed is not None else None
    for b, lo in enumerate(range(0, len(ds), batch_size)):
        idx = order[lo:lo + batch_size]
        flips = flip_rng.random(len(idx)) < 0.5 if flip_rng is not None else None
        if b < start:
            continue
        images = ds.images[idx]
        if flips is not None and flips.any():
            images = images.copy()
            images[flips] = images[flips][..., ::-1]
        yield Batch(idx, images, ds.labels[idx])


def prefetch(iterator, depth: int = 2):
    """Run ``iterator`` on a worker thread, handing items over a bounded queue."""
    if depth <= 0:
        yield from iterator
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def work():
        try:
            for item in iterator:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    worker = threading.Thread(target=work, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def load_dataset(cfg, data_dir=None) -> tuple[Dataset, Dataset]:
    """Train/test pair selected by ``cfg.dataset``, trimmed by the limit keys."""
    if cfg.dataset == "mnist":
        if data_dir is None:
            raise DataError("dataset = mnist needs --data-dir pointing at the IDX files")
        train, test = load_mnist_idx(data_dir)
    elif cfg.dataset == "cifar10":
        if data_dir is None:
            raise DataError("dataset = cifar10 needs --data-dir pointing at the binary batches")
        train, test = load_cifar10_bin(data_dir)
    else:
        full = make_synthetic(cfg.dataset, cfg.synthetic_n, cfg.classes, cfg.seed)
        cut = (len(full) * 3) // 4
        train = full.subset(np.arange(cut))
        test = full.subset(np.arange(cut, len(full)))
        test.split = "test"
    return train.head(cfg.train_limit), test.head(cfg.test_limit)
