import csv
import itertools
import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator

from control_gan.tensor_utils import Array, Tensor, default_dtype

logger = logging.getLogger(__name__)

MAX_BINARY_LABELS = 12
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}


class DatasetError(ValueError):
    """Raised when a dataset on disk cannot be turned into labeled samples"""

    def __init__(self, message: str, row: int | None = None) -> None:
        super().__init__(message)
        self.row = row


class DataSource(StrEnum):
    SYNTHETIC = "synthetic"
    IMAGES = "images"


class LabelEncoding(StrEnum):
    BINARY = "binary"
    ONE_HOT = "one_hot"


def label_combinations(label_dim: int, encoding: LabelEncoding = LabelEncoding.BINARY) -> Array:
    """Every admissible label vector, in a fixed order"""
    if label_dim <= 0:
        raise ValueError(f"label_dim must be positive, got {label_dim}")
    if encoding == LabelEncoding.ONE_HOT:
        return np.eye(label_dim)
    if label_dim > MAX_BINARY_LABELS:
        raise ValueError(f"Enumerating binary labels is limited to {MAX_BINARY_LABELS} labels, got {label_dim}")
    return np.array(list(itertools.product((0.0, 1.0), repeat=label_dim)))


def default_label_directions(label_dim: int, dim: int, seed: int = 0) -> list[list[float]]:
    """Axis-aligned unit directions, or seeded random unit vectors when labels outnumber axes"""
    if label_dim <= dim:
        return np.eye(label_dim, dim).tolist()
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(label_dim, dim))
    return (directions / np.linalg.norm(directions, axis=1, keepdims=True)).tolist()


def default_base_centers(directions: Array, spread: float = 0.0) -> list[list[float]]:
    """Centers around -0.5 * sum_k direction_k, mirrored by ``spread`` along every label direction.

    With a spread the label-0 and label-1 clusters of each label overlap, so real
    samples keep a non-trivial classification loss.
    """
    middle = -0.5 * directions.sum(axis=0)
    if spread == 0:
        return [middle.tolist()]
    if len(directions) > MAX_BINARY_LABELS:
        raise ValueError(f"base_spread supports at most {MAX_BINARY_LABELS} labels, got {len(directions)}")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=len(directions))))
    return (middle + spread * signs @ directions).tolist()


class SyntheticSpec(BaseModel):
    """Generative recipe: sample = base + sum_k l_k * direction_k + gaussian noise."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dim: int = Field(2, gt=0)
    label_dim: int = Field(2, gt=0)
    label_directions: list[list[float]] = Field(default_factory=list)
    base_centers: list[list[float]] = Field(default_factory=list)
    base_spread: float = Field(0.0, ge=0)
    noise_sigma: float = Field(0.15, ge=0)
    samples_per_combo: int = Field(2000, gt=0)
    label_encoding: LabelEncoding = LabelEncoding.BINARY
    seed: int = Field(0, ge=0)

    @model_validator(mode="before")
    @classmethod
    def fill_geometry(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        dim, label_dim = data.get("dim", 2), data.get("label_dim", 2)
        if not data.get("label_directions"):
            data["label_directions"] = default_label_directions(label_dim, dim, data.get("seed", 0))
        if not data.get("base_centers"):
            directions = np.asarray(data["label_directions"], dtype=np.float64)
            data["base_centers"] = default_base_centers(directions, data.get("base_spread", 0.0))
        return data

    @model_validator(mode="after")
    def check_geometry(self) -> "SyntheticSpec":
        directions = np.asarray(self.label_directions)
        if directions.shape != (self.label_dim, self.dim):
            raise ValueError(f"label_directions must be {self.label_dim} x {self.dim}, got {directions.shape}")
        norms = np.linalg.norm(directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError(f"label_directions must be unit vectors, got norms {norms.tolist()}")
        centers = np.asarray(self.base_centers)
        if centers.ndim != 2 or centers.shape[1] != self.dim:
            raise ValueError(f"base_centers must be rows of length {self.dim}")
        if self.label_encoding == LabelEncoding.BINARY and self.label_dim > MAX_BINARY_LABELS:
            raise ValueError(f"Binary synthetic data supports at most {MAX_BINARY_LABELS} labels")
        return self


class DatasetDescriptor(BaseModel):
    """Everything needed to interpret (and denormalize) samples of a dataset."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    source: DataSource
    sample_shape: tuple[int, ...]
    label_dim: int
    label_names: list[str]
    label_encoding: LabelEncoding = LabelEncoding.BINARY
    scale: float = 1.0
    split: str = "full"
    synthetic: SyntheticSpec | None = None
    image_dir: str | None = None
    label_file: str | None = None


@dataclass(frozen=True)
class LabeledDataset:
    samples: Array
    labels: Array
    descriptor: DatasetDescriptor
    base_index: npt.NDArray[np.int64] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if len(self.samples) != len(self.labels):
            raise DatasetError(f"{len(self.samples)} samples but {len(self.labels)} label rows")
        if self.labels.ndim != 2 or self.labels.shape[1] != self.descriptor.label_dim:
            raise DatasetError(f"labels must be (n, {self.descriptor.label_dim}), got {self.labels.shape}")
        if len(self.samples) and np.abs(self.samples).max() > 1.0:
            raise DatasetError("samples must be normalized into [-1, 1]")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def label_dim(self) -> int:
        return self.descriptor.label_dim

    def subset(self, index: npt.NDArray[np.int64], split: str) -> "LabeledDataset":
        return LabeledDataset(
            samples=self.samples[index],
            labels=self.labels[index],
            descriptor=self.descriptor.model_copy(update={"split": split}),
            base_index=None if self.base_index is None else self.base_index[index],
        )


def normalization_scale(raw: Array) -> float:
    """Smallest power of two that brings every coordinate into [-1, 1]"""
    peak = float(np.abs(raw).max(initial=0.0))
    return 1.0 if peak <= 1.0 else float(2.0 ** math.ceil(math.log2(peak)))


def make_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Draw ``samples_per_combo`` samples for every label combination"""
    rng = np.random.default_rng(spec.seed)
    directions = np.asarray(spec.label_directions, dtype=np.float64)
    centers = np.asarray(spec.base_centers, dtype=np.float64)
    labels = np.repeat(label_combinations(spec.label_dim, spec.label_encoding), spec.samples_per_combo, axis=0)
    base_index = rng.integers(len(centers), size=len(labels))
    noise = rng.normal(0.0, spec.noise_sigma, size=(len(labels), spec.dim))
    raw = centers[base_index] + labels @ directions + noise
    scale = normalization_scale(raw)

    descriptor = DatasetDescriptor(
        source=DataSource.SYNTHETIC,
        sample_shape=(spec.dim,),
        label_dim=spec.label_dim,
        label_names=[f"label_{k}" for k in range(spec.label_dim)],
        label_encoding=spec.label_encoding,
        scale=scale,
        synthetic=spec,
    )
    logger.info(f"Generated {len(labels)} synthetic samples in {spec.dim} dimensions (scale {scale:g})")
    return LabeledDataset(samples=raw / scale, labels=labels, descriptor=descriptor, base_index=base_index)


def denormalize(descriptor: DatasetDescriptor, samples: Array) -> Array:
    return np.asarray(samples) * descriptor.scale


def synthetic_projection(descriptor: DatasetDescriptor, samples: Array, label_index: int) -> float:
    """Mean projection of (sample - mean base center) onto one label direction.

    For orthogonal directions and base centers mirrored about their mean its expectation equals
    the mean value of that label among the samples.
    """
    if descriptor.synthetic is None:
        raise ValueError("Projections are only defined for synthetic datasets")
    if not 0 <= label_index < descriptor.label_dim:
        raise ValueError(f"label_index must lie in [0, {descriptor.label_dim}), got {label_index}")
    direction = np.asarray(descriptor.synthetic.label_directions[label_index])
    base = np.asarray(descriptor.synthetic.base_centers).mean(axis=0)
    raw = denormalize(descriptor, samples).reshape(len(samples), -1)
    return float(np.mean((raw - base) @ direction))


def _load_image(path: Path, scale: int, channels: int) -> Array:
    with Image.open(path) as image:
        converted = image.convert("L" if channels == 1 else "RGB")
        resized = converted.resize((scale, scale), Image.Resampling.BOX)
        pixels = np.asarray(resized, dtype=np.float64) / 127.5 - 1.0
    return pixels[..., None] if channels == 1 else pixels


def load_image_dataset(
    directory: str | Path,
    label_file: str | Path,
    scale: int = 32,
    channels: int = 1,
    encoding: LabelEncoding = LabelEncoding.BINARY,
) -> LabeledDataset:
    """
    Read images named in a label CSV and normalize them to [-1, 1].

    The label file has a header row ``filename,<label>,<label>,...`` and one row
    per image with 0/1 label values. Images are resized to ``scale x scale``.
    """
    if channels not in (1, 3):
        raise DatasetError(f"channels must be 1 or 3, got {channels}")
    directory, label_file = Path(directory), Path(label_file)
    if not directory.is_dir():
        raise DatasetError(f"Image directory {directory} does not exist")
    if not any(p.suffix.lower() in IMAGE_SUFFIXES for p in directory.iterdir()):
        raise DatasetError(f"Image directory {directory} contains no images")
    if not label_file.is_file():
        raise DatasetError(f"Label file {label_file} does not exist")

    samples: list[Array] = []
    labels: list[list[float]] = []
    with open(label_file, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise DatasetError(f"Label file {label_file} needs a header 'filename,<label>,...'", row=1)
        label_names = [name.strip() for name in header[1:]]
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"Row {row_number}: expected {len(header)} fields, got {len(row)}", row=row_number)
            filename, *values = (value.strip() for value in row)
            if any(value not in ("0", "1") for value in values):
                raise DatasetError(f"Row {row_number}: labels must be 0 or 1, got {values}", row=row_number)
            label_row = [float(value) for value in values]
            if encoding == LabelEncoding.ONE_HOT and sum(label_row) != 1:
                raise DatasetError(f"Row {row_number}: one-hot labels need exactly one 1", row=row_number)
            path = directory / filename
            if not path.is_file():
                raise DatasetError(f"Row {row_number}: image {path} does not exist", row=row_number)
            try:
                samples.append(_load_image(path, scale, channels))
            except OSError as e:
                raise DatasetError(f"Row {row_number}: cannot read image {path}: {e}", row=row_number) from e
            labels.append(label_row)

    if not samples:
        raise DatasetError(f"Label file {label_file} lists no images")
    descriptor = DatasetDescriptor(
        source=DataSource.IMAGES,
        sample_shape=(scale, scale, channels),
        label_dim=len(label_names),
        label_names=label_names,
        label_encoding=encoding,
        image_dir=str(directory),
        label_file=str(label_file),
    )
    logger.info(f"Loaded {len(samples)} images from {directory} with labels {label_names}")
    return LabeledDataset(samples=np.stack(samples), labels=np.array(labels), descriptor=descriptor)


def split_dataset(data: LabeledDataset, holdout_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint seeded (train, holdout) split"""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    n_holdout = round(len(data) * holdout_fraction)
    if n_holdout == 0 or n_holdout == len(data):
        raise ValueError(f"Cannot split {len(data)} samples with holdout_fraction {holdout_fraction}")
    order = np.random.default_rng(seed).permutation(len(data))
    holdout, train = np.sort(order[:n_holdout]), np.sort(order[n_holdout:])
    return data.subset(train, "train"), data.subset(holdout, "holdout")


def sample_noise(rng: np.random.Generator, batch: int, z_dim: int) -> Tensor:
    """Uniform noise strictly inside (-1, 1)"""
    if batch <= 0 or z_dim <= 0:
        raise ValueError(f"batch and z_dim must be positive, got {batch} and {z_dim}")
    dtype = default_dtype()
    bound = np.nextafter(dtype(1.0), dtype(0.0))
    values = rng.uniform(-1.0, 1.0, size=(batch, z_dim)).astype(dtype)
    return Tensor(np.clip(values, -bound, bound), dtype=dtype)


def batches_per_epoch(n_samples: int, batch_size: int) -> int:
    return n_samples // batch_size


def batches(data: LabeledDataset, batch_size: int, seed: int, epoch: int = 0) -> Iterator[tuple[Array, Array]]:
    """Seeded shuffled (samples, labels) batches; a partial final batch is dropped"""
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if batch_size > len(data):
        raise ValueError(f"batch_size {batch_size} exceeds the dataset size {len(data)}")
    order = np.random.default_rng([seed, epoch]).permutation(len(data))
    for start in range(0, batches_per_epoch(len(data), batch_size) * batch_size, batch_size):
        index = order[start : start + batch_size]
        yield data.samples[index], data.labels[index]
