import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.stats import spearmanr

from control_gan.data_utils import (
    MAX_BINARY_LABELS,
    DatasetDescriptor,
    LabeledDataset,
    LabelEncoding,
    label_combinations,
    sample_noise,
    synthetic_projection,
)
from control_gan.loss_utils import loss_c
from control_gan.model_utils import DataMode, ModelRole, ParamSet, build_model, classifier_forward, generator_forward
from control_gan.tensor_utils import Array, precision
from control_gan.train_utils import (
    GammaState,
    InsufficientHistoryError,
    TrainConfig,
    derive_seed,
    fit_classifier,
    measured_e_ratio,
    model_spec,
)

logger = logging.getLogger(__name__)

DEFAULT_SWEEP_VALUES = (-1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0)
REPORT_COLUMNS = ("configuration", "oracle_loss", "oracle_accuracy", "measured_e", "sweep_projections")


def train_oracle(data: LabeledDataset, seed: int, config: TrainConfig) -> ParamSet:
    """Independent classifier, trained on held-out real data, used only to score generated samples"""
    if len(data) == 0:
        raise ValueError("Cannot train the oracle on an empty dataset")
    with precision(config.precision):
        params = build_model(model_spec(config, ModelRole.CLASSIFIER), derive_seed(seed, "oracle"))
        fit_classifier(
            params,
            data,
            epochs=config.oracle_epochs,
            batch_size=config.batch_size,
            lr=config.lr_main,
            seed=derive_seed(seed, "oracle-batches"),
        )
    return params.freeze()


def score_samples(classifier: ParamSet, samples: Array, labels: Array) -> tuple[float, float]:
    """(mean per-label BCE, per-label accuracy at threshold 0.5) of a classifier on samples"""
    probs = classifier_forward(classifier.detached(), samples)
    loss = loss_c(labels, probs).item()
    accuracy = float(np.mean((probs.values > 0.5) == (np.asarray(labels) > 0.5)))
    return loss, accuracy


def label_fidelity(
    generator: ParamSet, oracle: ParamSet, labels: npt.ArrayLike, n_z: int = 64, seed: int = 0
) -> tuple[float, float]:
    """Generate ``n_z`` samples per label row and score them with the oracle"""
    if n_z <= 0:
        raise ValueError(f"n_z must be positive, got {n_z}")
    rows = np.repeat(np.atleast_2d(np.asarray(labels, dtype=np.float64)), n_z, axis=0)
    rng = np.random.default_rng(derive_seed(seed, "fidelity"))
    with precision(generator.spec.precision):
        z = sample_noise(rng, len(rows), generator.spec.z_dim)
        samples = generator_forward(generator.detached(), z, rows).values
        return score_samples(oracle, samples, rows)


class SweepSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    label_index: int = Field(ge=0)
    fixed_labels: tuple[float, ...]
    values: tuple[float, ...] = DEFAULT_SWEEP_VALUES
    n_z: int = Field(8, gt=0)
    seed: int = Field(0, ge=0)

    @field_validator("values")
    @classmethod
    def check_values(cls, values: tuple[float, ...]) -> tuple[float, ...]:
        if not values:
            raise ValueError("values must not be empty")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"values must be strictly increasing, got {list(values)}")
        return values

    @model_validator(mode="after")
    def check_label_index(self) -> "SweepSpec":
        if self.label_index >= len(self.fixed_labels):
            raise ValueError(f"label_index {self.label_index} is out of range for {len(self.fixed_labels)} labels")
        return self


@dataclass(frozen=True)
class SweepPoint:
    value: float
    samples: Array
    projection: float | None


def sweep(generator: ParamSet, spec: SweepSpec, descriptor: DatasetDescriptor | None = None) -> list[SweepPoint]:
    """Vary one label over ``spec.values`` with the noise vectors held fixed across all values"""
    if len(spec.fixed_labels) != generator.spec.label_dim:
        expected = generator.spec.label_dim
        raise ValueError(f"fixed_labels has {len(spec.fixed_labels)} entries, generator expects {expected}")
    project = descriptor is not None and descriptor.synthetic is not None
    rng = np.random.default_rng(derive_seed(spec.seed, "sweep"))
    points = []
    with precision(generator.spec.precision):
        z = sample_noise(rng, spec.n_z, generator.spec.z_dim)
        for value in spec.values:
            labels = np.tile(np.asarray(spec.fixed_labels, dtype=np.float64), (spec.n_z, 1))
            labels[:, spec.label_index] = value
            samples = generator_forward(generator.detached(), z, labels).values
            projection = (
                synthetic_projection(descriptor, samples, spec.label_index)  # pyright: ignore[reportArgumentType]
                if project
                else None
            )
            points.append(SweepPoint(value=value, samples=samples, projection=projection))
    return points


def sweep_rank_correlation(points: list[SweepPoint]) -> float:
    """Spearman correlation between swept values and mean projections"""
    projections = [point.projection for point in points]
    if len(points) < 2 or any(p is None for p in projections):
        raise ValueError("Rank correlation needs at least two points with projections")
    rho, _ = spearmanr([point.value for point in points], projections)
    return float(rho)


def label_grid(label_dim: int, pairs: int = 2) -> Array:
    """One column per single label, then ``pairs`` columns that switch on two labels together"""
    singles = np.eye(label_dim)
    combined = [singles[2 * i] + singles[2 * i + 1] for i in range(min(pairs, label_dim // 2))]
    return np.vstack([singles, *combined]) if combined else singles


def generate_label_grid(generator: ParamSet, columns: Array, n_rows: int, seed: int = 0) -> Array:
    """Samples laid out row-major: each row shares one noise vector, each column one label vector"""
    rng = np.random.default_rng(derive_seed(seed, "grid"))
    with precision(generator.spec.precision):
        z = sample_noise(rng, n_rows, generator.spec.z_dim).values
        z_rows = np.repeat(z, len(columns), axis=0)
        labels = np.tile(columns, (n_rows, 1))
        return generator_forward(generator.detached(), z_rows, labels).values


def grid_shape(n: int) -> tuple[int, int]:
    """(rows, cols) with cols the largest divisor of n not above ceil(sqrt(n))"""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    cols = math.ceil(math.sqrt(n))
    while n % cols:
        cols -= 1
    return n // cols, cols


def to_pixels(samples: Array) -> npt.NDArray[np.uint8]:
    return np.clip(np.rint((np.asarray(samples) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def emit_grid(samples: Array, rows: int, cols: int, path: str | Path) -> Path:
    """Tile (n, h, w, c) samples row-major into one PNG"""
    samples = np.asarray(samples)
    if samples.ndim != 4 or samples.shape[3] not in (1, 3):
        raise ValueError(f"emit_grid needs (n, h, w, 1|3) images, got shape {samples.shape}")
    if rows * cols != len(samples):
        raise ValueError(f"A {rows}x{cols} grid needs {rows * cols} samples, got {len(samples)}")
    _, height, width, channels = samples.shape
    tiles = to_pixels(samples).reshape(rows, cols, height, width, channels)
    grid = tiles.transpose(0, 2, 1, 3, 4).reshape(rows * height, cols * width, channels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid[..., 0] if channels == 1 else grid).save(path, format="PNG")
    logger.info(f"Wrote {rows}x{cols} grid to {path}")
    return path


class EvalMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    oracle_loss: float
    oracle_accuracy: float
    measured_e: float | None = None
    sweep_projections: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_finite(self) -> "EvalMetrics":
        values = [self.oracle_loss, self.oracle_accuracy, *self.sweep_projections]
        if self.measured_e is not None:
            values.append(self.measured_e)
        if not all(math.isfinite(value) for value in values):
            raise ValueError("Evaluation metrics must be finite")
        return self


class EvalReport(BaseModel):
    entries: dict[str, EvalMetrics] = Field(default_factory=dict)


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def emit_report(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for name, metrics in report.entries.items():
            writer.writerow(
                [
                    name,
                    _fmt(metrics.oracle_loss),
                    _fmt(metrics.oracle_accuracy),
                    "" if metrics.measured_e is None else _fmt(metrics.measured_e),
                    " ".join(_fmt(value) for value in metrics.sweep_projections),
                ]
            )
    logger.info(f"Wrote evaluation report with {len(report.entries)} configuration(s) to {path}")
    return path


def read_report(path: str | Path) -> EvalReport:
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path} is not an evaluation report; columns are {reader.fieldnames}")
        entries = {
            row["configuration"]: EvalMetrics(
                oracle_loss=float(row["oracle_loss"]),
                oracle_accuracy=float(row["oracle_accuracy"]),
                measured_e=float(row["measured_e"]) if row["measured_e"] else None,
                sweep_projections=[float(value) for value in row["sweep_projections"].split()],
            )
            for row in reader
        }
    return EvalReport(entries=entries)


def evaluation_labels(label_dim: int, encoding: LabelEncoding = LabelEncoding.BINARY) -> Array:
    """Every label combination, or the all-off vector plus the label grid when there are too many to list"""
    if encoding == LabelEncoding.ONE_HOT or label_dim <= MAX_BINARY_LABELS:
        return label_combinations(label_dim, encoding)
    logger.info(f"Scoring {label_dim} labels on single labels and label pairs instead of all combinations")
    return np.vstack([np.zeros((1, label_dim)), label_grid(label_dim)])


def evaluate_generator(
    generator: ParamSet,
    oracle: ParamSet,
    descriptor: DatasetDescriptor,
    gamma_state: GammaState | None = None,
    e_window: int = 500,
    n_z: int = 64,
    seed: int = 0,
) -> EvalMetrics:
    """Oracle label fidelity over the evaluation labels, measured E and, for synthetic data, a label-0 sweep"""
    combos = evaluation_labels(descriptor.label_dim, descriptor.label_encoding)
    oracle_loss, oracle_accuracy = label_fidelity(generator, oracle, combos, n_z=n_z, seed=seed)

    measured_e = None
    if gamma_state is not None and gamma_state.history:
        try:
            measured_e = measured_e_ratio(gamma_state, min(e_window, len(gamma_state.history)))
        except (InsufficientHistoryError, ArithmeticError):
            logger.warning("Measured E is undefined for this checkpoint", exc_info=True)

    projections: list[float] = []
    if descriptor.synthetic is not None and generator.spec.mode == DataMode.VECTOR:
        spec = SweepSpec(label_index=0, fixed_labels=(0.0,) * descriptor.label_dim, n_z=n_z, seed=seed)
        projections = [float(point.projection or 0.0) for point in sweep(generator, spec, descriptor)]
    return EvalMetrics(
        oracle_loss=oracle_loss, oracle_accuracy=oracle_accuracy, measured_e=measured_e, sweep_projections=projections
    )
