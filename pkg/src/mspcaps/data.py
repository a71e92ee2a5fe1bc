"""Dataset parsing (IDX, CIFAR-10 binary, MSPD), augmentation and batching."""

import gzip
import logging
import struct
from collections import deque
from collections.abc import Iterator
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import islice
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from scipy import ndimage

from mspcaps.errors import ContractError, DataError, FormatError

logger = logging.getLogger(__name__)

DatasetName = Literal["mnist", "fashion_mnist", "svhn", "cifar10"]
Split = Literal["train", "test"]
PathLike = Union[str, Path]

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32
MSPD_MAGIC = b"MSPD"
MSPD_HEADER = struct.Struct("<4s4I")


@dataclass(frozen=True)
class AugmentPolicy:
    """Preprocessing of one dataset; the random parts apply to the train split only."""

    resize_to: Optional[int] = None
    """Zero-pad square images up to this side at load time."""
    rotation_deg: Optional[float] = None
    """Rotate by an angle drawn uniformly from [-r, r] degrees."""
    hflip: bool = False
    crop_pad: Optional[int] = None
    """Zero-pad every side by this many pixels, then crop back at a random offset."""
    normalize_mean: tuple[float, ...] = (0.5,)
    normalize_std: tuple[float, ...] = (0.5,)


POLICIES: dict[str, AugmentPolicy] = {
    "mnist": AugmentPolicy(resize_to=32, rotation_deg=15.0),
    "fashion_mnist": AugmentPolicy(resize_to=32, hflip=True, crop_pad=4),
    "svhn": AugmentPolicy(rotation_deg=15.0, crop_pad=4, normalize_mean=(0.5,) * 3, normalize_std=(0.5,) * 3),
    "cifar10": AugmentPolicy(
        hflip=True,
        crop_pad=4,
        normalize_mean=(0.4914, 0.4822, 0.4465),
        normalize_std=(0.2023, 0.1994, 0.2010),
    ),
}


@dataclass
class Dataset:
    """Images and labels of one split, with the augmentation policy of their dataset."""

    images: np.ndarray
    """Raw pixels (N, C, H, W) in [0, 1], float32."""
    labels: np.ndarray
    """Class indices (N,), int64."""
    split: Split = "train"
    name: str = "custom"
    policy: AugmentPolicy = AugmentPolicy()

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, limit: Optional[int]) -> "Dataset":
        """Keep the first `limit` items."""
        if limit is None or limit >= len(self):
            return self
        return replace(self, images=self.images[:limit], labels=self.labels[:limit])


# Parsers


def _need(data: bytes, offset: int, size: int, what: str) -> None:
    if len(data) < offset + size:
        raise FormatError(f"truncated {what}: need {size} bytes, {len(data) - offset} left", offset)


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX u8 file: labels as int64 (N,), images as float32 (N, H, W) scaled to [0, 1]."""
    _need(data, 0, 4, "IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    magic = (zero << 16) | (dtype_code << 8) | ndim
    if magic not in (IDX_LABELS, IDX_IMAGES):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    _need(data, 4, 4 * ndim, "IDX dimensions")
    shape = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    offset = 4 + 4 * ndim
    count = int(np.prod(shape))
    _need(data, offset, count, "IDX payload")
    if len(data) != offset + count:
        raise FormatError(f"{len(data) - offset - count} trailing bytes after IDX payload", offset + count)
    values = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset).reshape(shape)
    if magic == IDX_LABELS:
        return values.astype(np.int64)
    return values.astype(np.float32) / np.float32(255)


def parse_cifar10_bin(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records (label byte, then R, G, B planes) into (N, 3, 32, 32) and labels."""
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        whole = len(data) - len(data) % CIFAR_RECORD
        raise FormatError(f"CIFAR-10 file of {len(data)} bytes is not a multiple of {CIFAR_RECORD}", whole)
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"CIFAR-10 label {labels[bad]} out of range", bad * CIFAR_RECORD)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return images, labels


def mspd_labels_path(path: PathLike) -> Path:
    """Return the labels sidecar that belongs to an MSPD file."""
    path = Path(path)
    return path.with_name(path.name + ".labels")


def write_mspd(path: PathLike, images: np.ndarray, labels: np.ndarray) -> None:
    """Write the MSPD container (header, float32 payload) plus its `<name>.labels` sidecar of N u8."""
    n, c, h, w = images.shape
    if labels.shape != (n,):
        raise DataError(f"{n} images but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise DataError("MSPD labels must fit in one byte")
    path = Path(path)
    payload = np.ascontiguousarray(images, dtype="<f4").tobytes()
    path.write_bytes(MSPD_HEADER.pack(MSPD_MAGIC, n, c, h, w) + payload)
    mspd_labels_path(path).write_bytes(labels.astype(np.uint8).tobytes())


def parse_mspd(data: bytes, label_bytes: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode an MSPD container and its labels sidecar."""
    _need(data, 0, MSPD_HEADER.size, "MSPD header")
    magic, n, c, h, w = MSPD_HEADER.unpack(data[: MSPD_HEADER.size])
    if magic != MSPD_MAGIC:
        raise FormatError(f"bad MSPD magic {magic!r}", 0)
    count = n * c * h * w
    _need(data, MSPD_HEADER.size, 4 * count, "MSPD payload")
    if len(data) != MSPD_HEADER.size + 4 * count:
        raise FormatError("trailing bytes after MSPD payload", MSPD_HEADER.size + 4 * count)
    if len(label_bytes) != n:
        raise FormatError(f"labels file holds {len(label_bytes)} bytes for {n} images", min(n, len(label_bytes)))
    images = np.frombuffer(data, dtype="<f4", count=count, offset=MSPD_HEADER.size)
    images = images.astype(np.float32).reshape(n, c, h, w)
    return images, np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)


def read_mspd(path: PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read an MSPD file and its labels sidecar from disk."""
    path = Path(path)
    return parse_mspd(_read(path), _read(mspd_labels_path(path)))


# Loading


def _read(path: Path) -> bytes:
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    if not path.exists():
        raise DataError(f"missing data file {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def pad_to(images: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad (N, C, H, W) images symmetrically to size x size."""
    h, w = images.shape[2:]
    if h > size or w > size:
        raise DataError(f"cannot pad {h}x{w} images down to {size}")
    top, left = (size - h) // 2, (size - w) // 2
    return np.pad(images, ((0, 0), (0, 0), (top, size - h - top), (left, size - w - left)))


_IDX_PREFIX = {"train": "train", "test": "t10k"}
_CIFAR_FILES = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}


def load_dataset(name: DatasetName, root: PathLike, split: Split, limit: Optional[int] = None) -> Dataset:
    """Load a split from `root/<name>/`, apply the load-time resize and keep the first `limit` items.

    Layout: IDX files for mnist and fashion_mnist (optionally gzipped), CIFAR-10 binary batches
    (optionally inside `cifar-10-batches-bin/`), and `svhn_<split>.mspd` with its labels sidecar.
    """
    if name not in POLICIES:
        raise DataError(f"unknown dataset {name!r}; choose from {sorted(POLICIES)}")
    folder = Path(root) / name
    policy = POLICIES[name]
    if name in ("mnist", "fashion_mnist"):
        prefix = _IDX_PREFIX[split]
        images = parse_idx(_read(folder / f"{prefix}-images-idx3-ubyte"))[:, None]
        labels = parse_idx(_read(folder / f"{prefix}-labels-idx1-ubyte"))
    elif name == "cifar10":
        if (folder / "cifar-10-batches-bin").is_dir():
            folder = folder / "cifar-10-batches-bin"
        parts = [parse_cifar10_bin(_read(folder / f)) for f in _CIFAR_FILES[split]]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    else:
        images, labels = read_mspd(folder / f"svhn_{split}.mspd")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{name} {split}: {images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if policy.resize_to:
        images = pad_to(images, policy.resize_to)
    logger.info("loaded %s/%s: %d images of shape %s", name, split, images.shape[0], images.shape[1:])
    return Dataset(np.ascontiguousarray(images, dtype=np.float32), labels, split, name, policy)


# Augmentation and batching


def augment(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Randomly rotate, crop and flip one (C, H, W) image; the result stays in [0, 1]."""
    out = img
    if policy.rotation_deg:
        angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
        out = ndimage.rotate(out, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
        out = np.clip(out, 0.0, 1.0)
    if policy.crop_pad:
        pad = policy.crop_pad
        h, w = out.shape[1:]
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)))
        top, left = rng.integers(0, 2 * pad + 1, size=2)
        out = padded[:, top : top + h, left : left + w]
    if policy.hflip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out, dtype=img.dtype)


def normalize_array(images: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    """Per-channel (x - mean) / std on an (N, C, H, W) array."""
    channels = images.shape[1]
    mean, std = policy.normalize_mean, policy.normalize_std
    if len(mean) == 1:
        mean, std = mean * channels, std * channels
    if len(mean) != channels or len(std) != channels:
        raise ContractError(f"normalization for {len(mean)} channels applied to {channels}")
    shape = (1, channels, 1, 1)
    m = np.asarray(mean, dtype=images.dtype).reshape(shape)
    s = np.asarray(std, dtype=images.dtype).reshape(shape)
    return (images - m) / s


@dataclass
class Batch:
    """One batch of normalized images with their labels."""

    images: np.ndarray
    """Normalized inputs (B, C, H, W)."""
    labels: np.ndarray
    indices: np.ndarray
    """Dataset positions of the items, in batch order."""


def epoch_permutation(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Return the item order of `epoch`, fixed by `shuffle_seed`."""
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def _prepare(dataset: Dataset, indices: np.ndarray, seed: int, epoch: int, augmented: bool) -> Batch:
    images = dataset.images[indices]
    if augmented:
        images = np.stack(
            [
                augment(img, dataset.policy, np.random.default_rng([seed, epoch, int(i)]))
                for img, i in zip(images, indices)
            ]
        )
    return Batch(normalize_array(images, dataset.policy), dataset.labels[indices], indices)


def _chunk_bounds(n: int, batch_size: int, min_batch: int) -> list[tuple[int, int]]:
    bounds = [(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < min_batch:
        # a short tail joins the batch before it
        tail = bounds.pop()
        bounds[-1] = (bounds[-1][0], tail[1])
    return bounds


def count_batches(n: int, batch_size: int, min_batch: int = 1) -> int:
    """Number of batches `batch_iter` yields for `n` items."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    return len(_chunk_bounds(n, batch_size, min_batch))


def batch_iter(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: int = 0,
    epoch: int = 0,
    *,
    shuffle: Optional[bool] = None,
    augmented: Optional[bool] = None,
    threads: int = 1,
    min_batch: int = 1,
) -> Iterator[Batch]:
    """Yield normalized batches; the final partial batch is kept.

    Shuffling and augmentation default to on for the train split and off for test. Each item
    is augmented with its own generator seeded by (shuffle_seed, epoch, item index), so output
    does not depend on `threads`. A final batch smaller than `min_batch` is merged into the one
    before it. With several threads at most `2 * threads` batches are prepared ahead of the
    consumer.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    train = dataset.split == "train"
    shuffle = train if shuffle is None else shuffle
    augmented = train if augmented is None else augmented
    order = epoch_permutation(len(dataset), shuffle_seed, epoch) if shuffle else np.arange(len(dataset))
    chunks = [order[start:stop] for start, stop in _chunk_bounds(len(order), batch_size, min_batch)]

    def prepare(chunk: np.ndarray) -> Batch:
        return _prepare(dataset, chunk, shuffle_seed, epoch, augmented)

    if threads <= 1 or len(chunks) < 2:
        yield from map(prepare, chunks)
        return
    remaining = iter(chunks)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending: deque[Future[Batch]] = deque(pool.submit(prepare, c) for c in islice(remaining, 2 * threads))
        try:
            while pending:
                yield pending.popleft().result()
                for chunk in islice(remaining, 1):
                    pending.append(pool.submit(prepare, chunk))
        finally:
            for future in pending:
                future.cancel()
