from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np
import numpy.typing as npt

from .errors import EmptySelectionError, FormatError, InvalidInputError
from .models import Classifier, predict
from .numerics import FloatArray, IntArray, RandomStream
from .serialization import PathLike, read_container, write_container

logger = logging.getLogger(__name__)

DATA_MAGIC = b"GFCSDATA"
DATA_FORMAT_VERSION = 1

GENERATORS = ("blobs", "minimages")


@dataclass
class LabeledDataset:
    """Inputs stored flattened as an ``(N, D)`` array, with ``shape`` the per-item shape.

    ``ids`` are the item indices in the dataset this one was derived from.
    """

    inputs: FloatArray
    labels: IntArray
    shape: Tuple[int, ...]
    num_classes: int
    generator: str = "external"
    seed: int = 0
    ids: IntArray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64).reshape(
            len(self.labels), -1
        )
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.shape = tuple(int(d) for d in self.shape)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if self.inputs.shape[1] != int(np.prod(self.shape)):
            raise InvalidInputError(
                f"inputs of width {self.inputs.shape[1]} do not match shape {self.shape}"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: npt.ArrayLike) -> LabeledDataset:
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.inputs[indices],
            self.labels[indices],
            self.shape,
            self.num_classes,
            self.generator,
            self.seed,
            self.ids[indices],
        )

    def metadata(self) -> Dict[str, Any]:
        return {
            "generator": self.generator,
            "seed": self.seed,
            "shape": list(self.shape),
            "num_classes": self.num_classes,
            "count": len(self),
        }


def gen_blobs(
    seed: int, dim: int, num_classes: int, per_class: int, spread: float
) -> LabeledDataset:
    """Gaussian clusters around means whose closest pair is exactly 1 apart.

    Each class contributes ``per_class`` samples ``mean + spread * N(0, I)``.
    """
    if dim < 2 or num_classes < 2:
        raise InvalidInputError(
            f"blobs need dim >= 2 and classes >= 2, got {dim!r}, {num_classes!r}"
        )
    stream = RandomStream(seed)
    means = stream.normal(1.0, (num_classes, dim))
    distances = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    means /= distances[~np.eye(num_classes, dtype=bool)].min()
    noise = stream.child(1).normal(1.0, (num_classes, per_class, dim))
    inputs = (means[:, None, :] + spread * noise).reshape(-1, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(inputs, labels, (dim,), num_classes, "blobs", seed)


def _class_pattern(
    stream: RandomStream, height: int, width: int, channels: int
) -> FloatArray:
    rows = np.arange(height)[:, None] / height
    cols = np.arange(width)[None, :] / width
    pattern = np.zeros((height, width, channels))
    for channel in range(channels):
        for _ in range(int(stream.integers(2, 4))):
            u, v = stream.integers(0, 4, 2)
            phase = stream.uniform(0, 2 * np.pi)
            amplitude = stream.uniform(0.1, 0.25)
            pattern[:, :, channel] += amplitude * np.cos(
                2 * np.pi * (u * rows + v * cols) + phase
            )
    center = stream.uniform(0.2, 0.8, 2)
    radius = stream.uniform(0.08, 0.2)
    blob = np.exp(
        -((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / (2 * radius**2)
    )
    pattern += stream.uniform(-0.35, 0.35, channels)[None, None, :] * blob[:, :, None]
    return 0.5 + pattern


def gen_minimages(
    seed: int,
    height: int,
    width: int,
    channels: int,
    num_classes: int,
    per_class: int,
    noise: float = 0.1,
) -> LabeledDataset:
    """Small images whose classes differ in low-frequency content and a localized blob.

    Every class has a fixed base pattern (a few low-frequency cosines per
    channel plus a Gaussian blob); samples add pixel noise and are clipped to
    ``[0, 1]``.
    """
    if height < 8 or width < 8:
        raise InvalidInputError(f"images must be at least 8x8, got {height}x{width}")
    if num_classes < 2 or channels < 1:
        raise InvalidInputError(
            f"need classes >= 2 and channels >= 1, got {num_classes!r}, {channels!r}"
        )
    stream = RandomStream(seed)
    pattern_stream = stream.child(0)
    patterns = np.stack(
        [
            _class_pattern(pattern_stream, height, width, channels)
            for _ in range(num_classes)
        ]
    )
    pixel_noise = stream.child(1).normal(
        noise, (num_classes, per_class, height, width, channels)
    )
    images = np.clip(patterns[:, None] + pixel_noise, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(
        images.reshape(num_classes * per_class, -1),
        labels,
        (height, width, channels),
        num_classes,
        "minimages",
        seed,
    )


def split_dataset(
    data: LabeledDataset, test_fraction: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    if not 0 <= test_fraction < 1:
        raise InvalidInputError(f"test fraction must be in [0, 1): {test_fraction!r}")
    order = RandomStream(seed).permutation(len(data))
    cut = int(round(len(data) * test_fraction))
    return data.subset(np.sort(order[cut:])), data.subset(np.sort(order[:cut]))


def filter_correct(
    model: Classifier, data: LabeledDataset, batch_size: int = 256
) -> Tuple[LabeledDataset, FloatArray]:
    """Keep the items ``model`` classifies correctly, with their score vectors.

    Ties in the argmax go to the lowest class index.
    """
    if data.inputs.shape[1] != model.input_size:
        raise InvalidInputError(
            f"dataset items have {data.inputs.shape[1]} entries,"
            f" model expects {model.input_size}"
        )
    scores = predict(model, data.inputs, batch_size)
    keep = np.flatnonzero(np.argmax(scores, axis=1) == data.labels)
    if keep.size == 0:
        raise EmptySelectionError("no items are classified correctly")
    logger.info("%d of %d items classified correctly", keep.size, len(data))
    return data.subset(keep), scores[keep]


def save_dataset(data: LabeledDataset, filename: PathLike) -> None:
    header = {"version": DATA_FORMAT_VERSION, **data.metadata()}
    write_container(
        filename,
        DATA_MAGIC,
        header,
        [data.inputs.astype("<f4"), data.labels.astype("<i4")],
    )


def load_dataset(filename: PathLike) -> LabeledDataset:
    reader = read_container(filename, DATA_MAGIC)
    header_offset = reader.offset
    header = reader.read_header(DATA_FORMAT_VERSION)
    try:
        shape = tuple(int(d) for d in header["shape"])
        count = int(header["count"])
        num_classes = int(header["num_classes"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed dataset header: {e}", header_offset) from e
    if count < 0 or any(d < 1 for d in shape):
        raise FormatError(f"Invalid dataset dimensions: {count}, {shape}", header_offset)
    inputs = reader.read_array("<f4", (count, int(np.prod(shape))), "inputs")
    label_offset = reader.offset
    labels = reader.read_array("<i4", (count,), "labels")
    reader.expect_end()
    if count and (labels.min() < 0 or labels.max() >= num_classes):
        raise FormatError(f"labels outside [0, {num_classes})", label_offset)
    return LabeledDataset(
        inputs.astype(np.float64),
        labels.astype(np.int64),
        shape,
        num_classes,
        str(header.get("generator", "external")),
        int(header.get("seed", 0)),
    )


__all__ = [
    "GENERATORS",
    "LabeledDataset",
    "filter_correct",
    "gen_blobs",
    "gen_minimages",
    "load_dataset",
    "save_dataset",
    "split_dataset",
]
