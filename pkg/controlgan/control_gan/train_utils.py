"""
Three-player training: generator, discriminator and a frozen auxiliary classifier
whose influence on the generator is set by a feedback-controlled weight (gamma).

Also hosts the conditional-GAN baseline, which trains the same generator and
discriminator architectures with the labels fed to the discriminator and no
classifier at all.
"""

import csv
import itertools
import logging
import math
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, fields, replace
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from control_gan.data_utils import (
    DataSource,
    LabeledDataset,
    LabelEncoding,
    SyntheticSpec,
    batches,
    batches_per_epoch,
    load_image_dataset,
    make_synthetic,
    sample_noise,
    split_dataset,
)
from control_gan.loss_utils import AdamState, adam_apply, loss_c, loss_d
from control_gan.model_utils import (
    DataMode,
    ModelRole,
    ModelSpec,
    ParamSet,
    Precision,
    build_model,
    classifier_forward,
    discriminator_forward,
    generator_forward,
)
from control_gan.tensor_utils import Array, Tape, Tensor, precision

logger = logging.getLogger(__name__)


class NumericalDivergenceError(ArithmeticError):
    """Raised when a loss becomes NaN or infinite during training"""

    def __init__(self, message: str, iteration: int) -> None:
        super().__init__(message)
        self.iteration = iteration


class InsufficientHistoryError(ValueError):
    """Raised when a ratio window is longer than the recorded loss history"""

    pass


class UndefinedRatioError(ArithmeticError):
    """Raised when the real-data classification loss averages to zero"""

    pass


class TrainingMode(StrEnum):
    CONTROLGAN = "controlgan"
    CGAN = "cgan"


class TrainConfig(BaseModel):
    """Every knob of a training run; validated once, then immutable."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: TrainingMode = TrainingMode.CONTROLGAN
    seed: int = Field(0, ge=0)

    # Controller
    alpha: float = Field(0.5, gt=0, le=1)
    t_d: float = Field(1.0, ge=0, le=1)
    e_target: float = Field(0.5, gt=0)
    r: float = Field(0.01, gt=0)
    gamma_init: float = Field(0.0, ge=0)
    e_window: int = Field(500, gt=0)
    history_size: int = Field(1000, gt=0)

    # Schedule
    lr_main: float = Field(2e-4, gt=0)
    lr_late: float = Field(5e-5, gt=0)
    epochs_before_decay: float = Field(30, ge=0)
    epochs: float = Field(50, ge=0)
    iterations: int | None = Field(None, ge=0)
    pretrain_epochs: float = Field(2.0, ge=0)
    oracle_epochs: float = Field(5.0, ge=0)
    batch_size: int = Field(64, gt=0)
    train_classifier_jointly: bool = False

    # Data
    data: DataSource = DataSource.SYNTHETIC
    dataset_path: Path | None = None
    label_file: Path | None = None
    image_scale: int = Field(32, gt=0)
    image_channels: int = Field(1, gt=0)
    label_dim: int = Field(2, gt=0)
    label_encoding: LabelEncoding = LabelEncoding.BINARY
    synthetic_dim: int = Field(2, gt=0)
    noise_sigma: float = Field(0.15, ge=0)
    synthetic_spread: float = Field(0.4, ge=0)
    samples_per_combo: int = Field(2000, gt=0)
    holdout_fraction: float = Field(0.25, gt=0, lt=1)

    # Model
    z_dim: int = Field(32, gt=0)
    base_channels: int = Field(16, gt=0)
    residual_counts_g: tuple[int, int, int] = (2, 4, 2)
    residual_counts_d: tuple[int, int, int] = (2, 4, 4)
    head_width: int = Field(128, gt=0)
    precision: Precision = "float64"

    # Reporting
    log_interval: int = Field(50, gt=0)
    checkpoint_interval: int = Field(1000, gt=0)

    @field_validator("residual_counts_g", "residual_counts_d", mode="before")
    @classmethod
    def parse_residual_counts(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(" ", "").split(",") if part)
        return value

    @model_validator(mode="after")
    def check_consistency(self) -> "TrainConfig":
        if self.data == DataSource.IMAGES:
            if self.dataset_path is None:
                raise ValueError("dataset_path is required when data = images")
            if self.label_file is None:
                raise ValueError("label_file is required when data = images")
        if self.e_window > self.history_size:
            raise ValueError(f"e_window ({self.e_window}) must not exceed history_size ({self.history_size})")
        return self


def model_spec(config: TrainConfig, role: ModelRole) -> ModelSpec:
    image = config.data == DataSource.IMAGES
    return ModelSpec(
        role=role,
        mode=DataMode.IMAGE if image else DataMode.VECTOR,
        base_channels=config.base_channels,
        spatial_scale=config.image_scale if image else config.synthetic_dim,
        channels=config.image_channels,
        residual_counts=config.residual_counts_g if role == ModelRole.GENERATOR else config.residual_counts_d,
        z_dim=config.z_dim,
        label_dim=config.label_dim,
        head_width=config.head_width,
        label_conditioning=role == ModelRole.DISCRIMINATOR and config.mode == TrainingMode.CGAN,
        precision=config.precision,
    )


def derive_seed(seed: int, stream: str) -> int:
    """Independent, reproducible seed for one named random stream"""
    return int(np.random.SeedSequence([seed, zlib.crc32(stream.encode())]).generate_state(1)[0])


def prepare_data(config: TrainConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Build or load the dataset and split it into (train, holdout)"""
    if config.data == DataSource.SYNTHETIC:
        spec = SyntheticSpec(
            dim=config.synthetic_dim,
            label_dim=config.label_dim,
            noise_sigma=config.noise_sigma,
            base_spread=config.synthetic_spread,
            samples_per_combo=config.samples_per_combo,
            label_encoding=config.label_encoding,
            seed=derive_seed(config.seed, "synthetic"),
        )
        full = make_synthetic(spec)
    else:
        full = load_image_dataset(
            config.dataset_path,  # pyright: ignore[reportArgumentType]
            config.label_file,  # pyright: ignore[reportArgumentType]
            scale=config.image_scale,
            channels=config.image_channels,
            encoding=config.label_encoding,
        )
        if full.label_dim != config.label_dim:
            raise ValueError(f"label_dim is {config.label_dim} but {config.label_file} has {full.label_dim} labels")
    return split_dataset(full, config.holdout_fraction, derive_seed(config.seed, "split"))


# Equilibrium controller


@dataclass(frozen=True)
class GammaState:
    gamma: float
    r: float
    e_target: float
    history: tuple[tuple[float, float], ...] = ()
    history_size: int = 1000

    def __post_init__(self) -> None:
        if self.gamma < 0 or self.r <= 0 or self.e_target <= 0:
            raise ValueError(f"Invalid controller state gamma={self.gamma} r={self.r} e_target={self.e_target}")


def update_gamma(state: GammaState, lc_gen: float, lc_real: float) -> GammaState:
    """gamma <- max(0, gamma + r * (lc_gen - e_target * lc_real)), recording the pair"""
    if lc_gen < 0 or lc_real < 0:
        raise ValueError(f"Classification losses must be non-negative, got {lc_gen} and {lc_real}")
    gamma = max(0.0, state.gamma + state.r * (lc_gen - state.e_target * lc_real))
    history = (*state.history, (lc_gen, lc_real))[-state.history_size :]
    return replace(state, gamma=gamma, history=history)


def measured_e_ratio(state: GammaState, window: int) -> float:
    """Mean generated-sample loss over mean real-sample loss across the last ``window`` updates"""
    if window <= 0 or window > len(state.history):
        raise InsufficientHistoryError(f"Window {window} needs that many updates; {len(state.history)} recorded")
    recent = np.asarray(state.history[-window:])
    gen, real = float(recent[:, 0].mean()), float(recent[:, 1].mean())
    if real == 0.0:
        raise UndefinedRatioError(f"Real-sample classification loss averages to zero over the last {window} updates")
    return gen / real


# Training state and steps


@dataclass
class TrainState:
    config: TrainConfig
    params_g: ParamSet
    params_d: ParamSet
    params_c: ParamSet | None
    adam_g: AdamState
    adam_d: AdamState
    adam_c: AdamState | None
    gamma_state: GammaState
    rng: np.random.Generator
    iteration: int = 0
    classifier_evaluations: int = 0


@dataclass(frozen=True)
class DiscriminatorLosses:
    real: float
    fake: float
    total: float


@dataclass(frozen=True)
class GeneratorLosses:
    classification: float
    adversarial: float


def _ensure_finite(iteration: int, phase: str, *values: float) -> None:
    if not all(math.isfinite(value) for value in values):
        raise NumericalDivergenceError(f"Non-finite {phase} loss at iteration {iteration}: {values}", iteration)


def _conditioning(params_d: ParamSet, labels: Tensor) -> Tensor | None:
    return labels if params_d.spec.label_conditioning else None


def init_state(config: TrainConfig, theta_c: ParamSet | None = None) -> TrainState:
    """Fresh generator and discriminator for ``config``, around an optional pretrained classifier"""
    params_g = build_model(model_spec(config, ModelRole.GENERATOR), derive_seed(config.seed, "generator"))
    params_d = build_model(model_spec(config, ModelRole.DISCRIMINATOR), derive_seed(config.seed, "discriminator"))
    params_c, adam_c = None, None
    if config.mode == TrainingMode.CONTROLGAN:
        if theta_c is None:
            raise ValueError("controlgan mode needs a pretrained classifier")
        if theta_c.spec.label_dim != config.label_dim:
            raise ValueError(f"Classifier predicts {theta_c.spec.label_dim} labels, config has {config.label_dim}")
        if config.train_classifier_jointly:
            params_c = theta_c.copy()
            params_c.frozen = False
            adam_c = AdamState.for_params(params_c, lr=config.lr_main)
        else:
            params_c = theta_c.freeze()
    return TrainState(
        config=config,
        params_g=params_g,
        params_d=params_d,
        params_c=params_c,
        adam_g=AdamState.for_params(params_g, lr=config.lr_main),
        adam_d=AdamState.for_params(params_d, lr=config.lr_main),
        adam_c=adam_c,
        gamma_state=GammaState(
            gamma=config.gamma_init, r=config.r, e_target=config.e_target, history_size=config.history_size
        ),
        rng=np.random.default_rng(derive_seed(config.seed, "noise")),
    )


def discriminator_step(state: TrainState, real_batch: Array, labels: Array) -> DiscriminatorLosses:
    """One Adam step on the discriminator; the generator only supplies constants"""
    config = state.config
    x, l = Tensor(real_batch), Tensor(labels)
    z = sample_noise(state.rng, len(real_batch), config.z_dim)
    fake = generator_forward(state.params_g.detached(), z, l)
    condition = _conditioning(state.params_d, l)

    state.params_d.zero_grad()
    with Tape() as tape:
        loss_real = loss_d(config.t_d, discriminator_forward(state.params_d, x, condition))
        loss_fake = loss_d(1.0 - config.t_d, discriminator_forward(state.params_d, fake, condition))
        total = loss_real * config.alpha + loss_fake * (1.0 - config.alpha)
    losses = DiscriminatorLosses(real=loss_real.item(), fake=loss_fake.item(), total=total.item())
    _ensure_finite(state.iteration, "discriminator", losses.real, losses.fake, losses.total)
    tape.backward(total)
    adam_apply(state.adam_d, state.params_d)
    return losses


def real_classification_loss(state: TrainState, real_batch: Array, labels: Array) -> float:
    """Classifier loss on real samples; used as the reference in the gamma update"""
    if state.params_c is None:
        raise ValueError("No classifier in this training mode")
    value = loss_c(labels, classifier_forward(state.params_c.detached(), real_batch)).item()
    _ensure_finite(state.iteration, "real classification", value)
    return value


def generator_objective(
    params_g: ParamSet,
    params_d: ParamSet,
    params_c: ParamSet | None,
    z: Tensor,
    labels: Tensor,
    t_d: float,
) -> tuple[Tensor | None, Tensor]:
    """(classification loss, adversarial loss) of generated samples; the former is None without a classifier"""
    fake = generator_forward(params_g, z, labels)
    adversarial = loss_d(t_d, discriminator_forward(params_d, fake, _conditioning(params_d, labels)))
    if params_c is None:
        return None, adversarial
    return loss_c(labels, classifier_forward(params_c, fake)), adversarial


def generator_step(state: TrainState, labels: Array) -> GeneratorLosses:
    """One Adam step on the generator against gamma * L_C + L_D; D and C stay untouched"""
    config = state.config
    l = Tensor(labels)
    z = sample_noise(state.rng, len(labels), config.z_dim)
    params_c = None if state.params_c is None else state.params_c.detached()

    state.params_g.zero_grad()
    with Tape() as tape:
        classification, adversarial = generator_objective(
            state.params_g, state.params_d.detached(), params_c, z, l, config.t_d
        )
        total = adversarial if classification is None else classification * state.gamma_state.gamma + adversarial
    losses = GeneratorLosses(
        classification=math.nan if classification is None else classification.item(),
        adversarial=adversarial.item(),
    )
    _ensure_finite(state.iteration, "generator", losses.adversarial, total.item())
    if classification is not None:
        state.classifier_evaluations += 1
        _ensure_finite(state.iteration, "generator classification", losses.classification)
    tape.backward(total)
    adam_apply(state.adam_g, state.params_g)
    return losses


def _classifier_update(params: ParamSet, adam: AdamState, samples: Array, labels: Array) -> float:
    params.zero_grad()
    with Tape() as tape:
        loss = loss_c(labels, classifier_forward(params, samples))
    tape.backward(loss)
    adam_apply(adam, params)
    return loss.item()


def classifier_step(state: TrainState, real_batch: Array, labels: Array) -> float:
    """Classifier update on real data, only when it trains jointly with the generator"""
    if state.params_c is None or state.adam_c is None:
        raise ValueError("The classifier is frozen or absent; nothing to step")
    value = _classifier_update(state.params_c, state.adam_c, real_batch, labels)
    _ensure_finite(state.iteration, "classifier", value)
    return value


def fit_classifier(
    params: ParamSet, data: LabeledDataset, epochs: float, batch_size: int, lr: float, seed: int
) -> ParamSet:
    """Train a classifier on real labeled samples for a (possibly fractional) number of epochs"""
    batch_size = min(batch_size, len(data))
    per_epoch = batches_per_epoch(len(data), batch_size)
    total = round(epochs * per_epoch)
    adam = AdamState.for_params(params, lr=lr)
    losses: list[float] = []
    for epoch in itertools.count():
        if len(losses) >= total:
            break
        for samples, labels in itertools.islice(batches(data, batch_size, seed, epoch), total - len(losses)):
            value = _classifier_update(params, adam, samples, labels)
            if not math.isfinite(value):
                raise NumericalDivergenceError(f"Non-finite classifier loss at iteration {len(losses)}", len(losses))
            losses.append(value)
    if losses:
        logger.info(f"Fitted {params.spec.role} for {total} iterations; last batch loss {losses[-1]:.4f}")
    return params


def pretrain_classifier(config: TrainConfig, data: LabeledDataset) -> ParamSet:
    """Train the auxiliary classifier on real data only and return it frozen"""
    if len(data) == 0:
        raise ValueError("Cannot pretrain the classifier on an empty dataset")
    if not np.isin(data.labels, (0.0, 1.0)).all():
        raise ValueError("Classifier labels must be 0 or 1")
    with precision(config.precision):
        params = build_model(model_spec(config, ModelRole.CLASSIFIER), derive_seed(config.seed, "classifier"))
        fit_classifier(
            params,
            data,
            epochs=config.pretrain_epochs,
            batch_size=config.batch_size,
            lr=config.lr_main,
            seed=derive_seed(config.seed, "classifier-batches"),
        )
    return params.freeze()


def mean_classification_loss(params_c: ParamSet, data: LabeledDataset, chunk: int = 256) -> float:
    total = 0.0
    for start in range(0, len(data), chunk):
        samples, labels = data.samples[start : start + chunk], data.labels[start : start + chunk]
        total += loss_c(labels, classifier_forward(params_c.detached(), samples)).item() * len(samples)
    return total / len(data)


def learning_rate(config: TrainConfig, iteration: int, per_epoch: int) -> float:
    """Main rate until the decay epoch, then the late rate"""
    return config.lr_main if iteration < config.epochs_before_decay * per_epoch else config.lr_late


def total_iterations(config: TrainConfig, per_epoch: int) -> int:
    return config.iterations if config.iterations is not None else round(config.epochs * per_epoch)


# Metrics and callbacks


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    loss_d_real: float
    loss_d_fake: float
    loss_g_adv: float
    loss_g_cls: float
    gamma: float
    lc_real: float
    measured_e: float


METRIC_FIELDS = tuple(f.name for f in fields(MetricsRecord))


def format_metrics_row(record: MetricsRecord) -> list[str]:
    return [str(record.iteration)] + [f"{getattr(record, name):.6g}" for name in METRIC_FIELDS[1:]]


class TrainCallback:
    """Observer hooks of the training loop; they must not mutate the state."""

    def on_metrics(self, record: MetricsRecord) -> None:
        pass

    def on_iteration(self, state: TrainState) -> None:
        pass

    def on_abort(self, state: TrainState, error: Exception) -> None:
        pass


class MetricsCsvWriter(TrainCallback):
    """Append metrics rows to a CSV; on resume keeps only rows up to the resumed iteration."""

    def __init__(self, path: str | Path, resume_from: int | None = None) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept: list[list[str]] = []
        if resume_from is not None and self.path.is_file():
            with open(self.path, encoding="utf-8", newline="") as handle:
                kept = [row for row in list(csv.reader(handle))[1:] if row and int(row[0]) <= resume_from]
        with open(self.path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(METRIC_FIELDS)
            writer.writerows(kept)

    def on_metrics(self, record: MetricsRecord) -> None:
        with open(self.path, "a", encoding="utf-8", newline="") as handle:
            csv.writer(handle, lineterminator="\n").writerow(format_metrics_row(record))


class MetricsCollector(TrainCallback):
    def __init__(self) -> None:
        self.records: list[MetricsRecord] = []

    def on_metrics(self, record: MetricsRecord) -> None:
        self.records.append(record)


def current_measured_e(state: TrainState) -> float:
    window = min(state.config.e_window, len(state.gamma_state.history))
    if state.params_c is None or window == 0:
        return math.nan
    try:
        return measured_e_ratio(state.gamma_state, window)
    except UndefinedRatioError:
        return math.nan


def _run_loop(state: TrainState, data: LabeledDataset, callbacks: Sequence[TrainCallback]) -> TrainState:
    config = state.config
    per_epoch = batches_per_epoch(len(data), config.batch_size)
    if per_epoch == 0:
        raise ValueError(f"batch_size {config.batch_size} exceeds the training set size {len(data)}")
    total = total_iterations(config, per_epoch)
    batch_seed = derive_seed(config.seed, "batches")
    controlled = state.params_c is not None
    logger.info(
        f"Training {config.mode} from iteration {state.iteration} to {total} "
        f"({per_epoch} batches per epoch, E={config.e_target}, alpha={config.alpha})"
    )

    while state.iteration < total:
        epoch, offset = divmod(state.iteration, per_epoch)
        epoch_batches = batches(data, config.batch_size, batch_seed, epoch)
        for samples, labels in itertools.islice(epoch_batches, offset, offset + total - state.iteration):
            lr = learning_rate(config, state.iteration, per_epoch)
            if lr != state.adam_g.lr:
                logger.info(f"Learning rate {state.adam_g.lr:g} -> {lr:g} at iteration {state.iteration}")
            for adam in (state.adam_g, state.adam_d, state.adam_c):
                if adam is not None:
                    adam.lr = lr
            try:
                d_losses = discriminator_step(state, samples, labels)
                lc_real = real_classification_loss(state, samples, labels) if controlled else math.nan
                if state.adam_c is not None:
                    classifier_step(state, samples, labels)
                g_losses = generator_step(state, labels)
                if controlled:
                    state.gamma_state = update_gamma(state.gamma_state, g_losses.classification, lc_real)
            except NumericalDivergenceError as e:
                logger.error(f"Training diverged at iteration {e.iteration}", exc_info=True)
                for callback in callbacks:
                    callback.on_abort(state, e)
                raise

            state.iteration += 1
            if state.iteration % config.log_interval == 0:
                record = MetricsRecord(
                    iteration=state.iteration,
                    loss_d_real=d_losses.real,
                    loss_d_fake=d_losses.fake,
                    loss_g_adv=g_losses.adversarial,
                    loss_g_cls=g_losses.classification,
                    gamma=state.gamma_state.gamma if controlled else math.nan,
                    lc_real=lc_real,
                    measured_e=current_measured_e(state),
                )
                logger.info(
                    f"iter {record.iteration}: L_D real {record.loss_d_real:.4f} fake {record.loss_d_fake:.4f}, "
                    f"L_G adv {record.loss_g_adv:.4f} cls {record.loss_g_cls:.4f}, gamma {record.gamma:.4f}"
                )
                for callback in callbacks:
                    callback.on_metrics(record)
            for callback in callbacks:
                callback.on_iteration(state)
    return state


def train(
    config: TrainConfig,
    data: LabeledDataset,
    theta_c: ParamSet | None,
    callbacks: Sequence[TrainCallback] = (),
    state: TrainState | None = None,
) -> TrainState:
    """Run controlled three-player training, optionally continuing from ``state``"""
    if config.mode != TrainingMode.CONTROLGAN:
        raise ValueError(f"train() runs mode controlgan, config has {config.mode}; use train_cgan_baseline")
    with precision(config.precision):
        state = state if state is not None else init_state(config, theta_c)
        return _run_loop(state, data, callbacks)


def train_cgan_baseline(
    config: TrainConfig,
    data: LabeledDataset,
    callbacks: Sequence[TrainCallback] = (),
    state: TrainState | None = None,
) -> TrainState:
    """Conditional-GAN baseline: labels go to the discriminator, no classifier, no gamma"""
    if config.mode != TrainingMode.CGAN:
        raise ValueError(f"train_cgan_baseline() runs mode cgan, config has {config.mode}")
    with precision(config.precision):
        state = state if state is not None else init_state(config)
        return _run_loop(state, data, callbacks)
