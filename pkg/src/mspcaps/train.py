"""Training and evaluation loops, the checkpoint container and the metrics file."""

import csv
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from mspcaps.capsule import margin_loss, predict
from mspcaps.data import Dataset, batch_iter, count_batches
from mspcaps.errors import FormatError, IncompatibleCheckpointError, NumericAbort
from mspcaps.model import ModelConfig, MSPCaps
from mspcaps.optim import AdamW, Schedule, lr_at
from mspcaps.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MIN_TRAIN_BATCH = 2
"""Batch statistics need two items; a shorter final batch joins the one before it."""


@dataclass
class EpochMetrics:
    """Averages over the trained batches of one epoch."""

    loss: float
    accuracy: float
    lr: float
    """Learning rate of the last optimizer step."""
    steps: int
    seconds: float = 0.0


@dataclass
class EvalMetrics:
    """Accuracy and mean loss over a whole split."""

    accuracy: float
    loss: float
    count: int


def model_dtype(model: MSPCaps) -> np.dtype:
    """Return the floating dtype the model computes in."""
    return model.parameters()[0].dtype


def training_steps(n: int, batch_size: int) -> int:
    """Optimizer steps `train_epoch` takes over `n` items; at least 1 for schedule sizing."""
    return max(1, count_batches(n, batch_size, MIN_TRAIN_BATCH))


def train_epoch(
    model: MSPCaps,
    data: Dataset,
    optimizer: AdamW,
    schedule: Schedule,
    rng: np.random.Generator,
    *,
    epoch: int,
    global_step: int,
    batch_size: int = 128,
    shuffle_seed: int = 0,
    threads: int = 1,
) -> EpochMetrics:
    """Run one pass over `data`: forward, margin loss, backward, AdamW step, zero grads.

    `rng` drives dropout. A final single-item batch joins the batch before it, and a split of
    one item trains nothing, because batch statistics need at least two.
    """
    model.train()
    dtype = model_dtype(model)
    started = time.perf_counter()
    total_loss, correct, seen, steps, lr = 0.0, 0, 0, 0, lr_at(schedule, global_step)
    for batch in batch_iter(data, batch_size, shuffle_seed, epoch, threads=threads, min_batch=MIN_TRAIN_BATCH):
        if len(batch.labels) < MIN_TRAIN_BATCH:
            logger.debug("skipping a batch of one item at step %d", global_step + steps)
            continue
        lr = lr_at(schedule, global_step + steps)
        optimizer.set_lr(lr)
        out = model(Tensor(batch.images, dtype=dtype), rng)
        loss = margin_loss(out, batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            logger.error("numeric abort at step %d: lr=%.3e loss=%s", global_step + steps, lr, value)
            raise NumericAbort(global_step + steps, lr, value)
        backward(loss)
        optimizer.step()
        optimizer.zero_grad()

        n = len(batch.labels)
        total_loss += value * n
        correct += int(np.sum(predict(out) == batch.labels))
        seen += n
        steps += 1
    seen = max(seen, 1)
    return EpochMetrics(total_loss / seen, correct / seen, lr, steps, time.perf_counter() - started)


def evaluate(model: MSPCaps, data: Dataset, batch_size: int = 256) -> EvalMetrics:
    """Accuracy (longest class capsule equals the label) and mean margin loss, in eval mode."""
    was_training = model.training
    model.eval()
    dtype = model_dtype(model)
    total_loss, correct = 0.0, 0
    try:
        with no_grad():
            for batch in batch_iter(data, batch_size, shuffle=False, augmented=False):
                out = model(Tensor(batch.images, dtype=dtype))
                total_loss += margin_loss(out, batch.labels).item() * len(batch.labels)
                correct += int(np.sum(predict(out) == batch.labels))
    finally:
        model.train(was_training)
    count = len(data)
    return EvalMetrics(correct / max(count, 1), total_loss / max(count, 1), count)


# Checkpoint container

CHECKPOINT_MAGIC = b"MSPC"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    """A decoded checkpoint: model configuration, named tensors and metadata."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    """Named arrays: `param/…`, `buffer/…`, `adam_m/…`, `adam_v/…`."""
    metadata: dict[str, Any] = field(default_factory=dict)
    """Epoch, global step, optimizer step, dropout RNG state, run config, best metrics."""

    def restore(
        self,
        model: MSPCaps,
        optimizer: Optional[AdamW] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        """Load the stored state into `model` and, when given, `optimizer` and `rng`."""
        model.load_state_dict({k: v for k, v in self.tensors.items() if k.startswith(("param/", "buffer/"))})
        if optimizer is not None:
            moments = {k: v for k, v in self.tensors.items() if k.startswith(("adam_m/", "adam_v/"))}
            optimizer.load_state_dict(moments, int(self.metadata.get("optimizer_step", 0)))
        if rng is not None and "rng_state" in self.metadata:
            rng.bit_generator.state = self.metadata["rng_state"]


def save_checkpoint(
    path: PathLike,
    model: MSPCaps,
    optimizer: Optional[AdamW] = None,
    rng: Optional[np.random.Generator] = None,
    **metadata: Any,
) -> None:
    """Write model, optimizer moments and RNG state to the little-endian MSPC container."""
    tensors = model.state_dict()
    meta: dict[str, Any] = {"model_config": model.config.model_dump(mode="json"), **metadata}
    if optimizer is not None:
        tensors.update(optimizer.state_dict())
        meta["optimizer_step"] = optimizer.state.step
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    blob = json.dumps(meta, sort_keys=True).encode()

    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        model.config.fingerprint(),
        struct.pack("<I", len(blob)),
        blob,
        struct.pack("<I", len(tensors)),
    ]
    for name, array in tensors.items():
        array = np.asarray(array)
        if array.dtype not in _DTYPE_CODES:
            array = array.astype(np.float32)
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", _DTYPE_CODES[array.dtype], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    logger.info("wrote checkpoint %s (%d tensors)", path, len(tensors))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data: bytes, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Decode checkpoint bytes; `expected` must share the stored configuration fingerprint when given."""
    reader = _Reader(data)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not an MSPC checkpoint", 0)
    (version,) = reader.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    fingerprint = reader.take(32, "config fingerprint")
    (meta_len,) = reader.unpack("<I", "metadata length")
    meta_offset = reader.offset
    try:
        metadata = json.loads(reader.take(meta_len, "metadata"))
        config = ModelConfig.model_validate(metadata["model_config"])
    except (ValueError, KeyError) as e:
        raise FormatError(f"unreadable checkpoint metadata: {e}", meta_offset) from None
    if config.fingerprint() != fingerprint:
        raise FormatError("stored model configuration does not match its fingerprint", 8)
    if expected is not None and expected.fingerprint() != fingerprint:
        raise IncompatibleCheckpointError("checkpoint was written for a different model configuration")

    (count,) = reader.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "tensor name").decode()
        code, rank = reader.unpack("<BB", f"header of {name}")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name}", reader.offset - 2)
        dtype = _CODE_DTYPES[code].newbyteorder("<")
        shape = reader.unpack(f"<{rank}I", f"extents of {name}")
        payload = reader.take(int(np.prod(shape)) * dtype.itemsize, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).astype(_CODE_DTYPES[code]).reshape(shape)
    if reader.offset != len(data):
        raise FormatError("trailing bytes after the last tensor", reader.offset)
    return Checkpoint(config, tensors, metadata)


def load_checkpoint(path: PathLike, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; `expected` must share the stored configuration fingerprint when given."""
    return parse_checkpoint(Path(path).read_bytes(), expected)


# Metrics file

METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "lr", "seconds")


@dataclass
class MetricsRow:
    """One line of the metrics CSV."""

    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float
    seconds: float = 0.0

    def as_record(self) -> list[str]:
        """Return the row as CSV fields, floats written with `repr`."""
        return [str(self.epoch), self.split, repr(self.loss), repr(self.accuracy), repr(self.lr), repr(round(self.seconds, 3))]


def append_metrics(path: PathLike, rows: list[MetricsRow]) -> None:
    """Append rows to the metrics CSV, writing the header when the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerows(row.as_record() for row in rows)
