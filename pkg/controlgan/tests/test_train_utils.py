import csv
import math
from pathlib import Path

import numpy as np
import pytest
from conftest import tiny_config

from control_gan.data_utils import LabeledDataset, batches, sample_noise
from control_gan.model_utils import ModelRole, ParamSet, build_model
from control_gan.tensor_utils import Tape, Tensor
from control_gan.train_utils import (
    METRIC_FIELDS,
    GammaState,
    InsufficientHistoryError,
    MetricsCollector,
    MetricsCsvWriter,
    NumericalDivergenceError,
    TrainCallback,
    TrainConfig,
    TrainingMode,
    TrainState,
    UndefinedRatioError,
    derive_seed,
    discriminator_step,
    generator_objective,
    generator_step,
    init_state,
    learning_rate,
    measured_e_ratio,
    model_spec,
    pretrain_classifier,
    real_classification_loss,
    train,
    train_cgan_baseline,
    update_gamma,
)


@pytest.fixture
def theta_c(config: TrainConfig, train_data: LabeledDataset) -> ParamSet:
    return pretrain_classifier(config, train_data)


def _first_batch(data: LabeledDataset, size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    return data.samples[:size], data.labels[:size]


# Controller


def test_gamma_update_direct_arithmetic() -> None:
    state = GammaState(gamma=1.0, r=0.01, e_target=0.5)

    updated = update_gamma(state, lc_gen=0.7, lc_real=1.0)

    assert updated.gamma == pytest.approx(1.002, abs=1e-12)
    assert updated.history == ((0.7, 1.0),)
    assert state.history == ()


def test_gamma_fixed_point() -> None:
    state = GammaState(gamma=0.3, r=0.01, e_target=0.5)

    assert update_gamma(state, lc_gen=0.2, lc_real=0.4).gamma == 0.3


def test_gamma_is_clamped_at_zero() -> None:
    state = GammaState(gamma=0.0, r=0.01, e_target=1.0)

    assert update_gamma(state, lc_gen=0.1, lc_real=0.5).gamma == 0.0


def test_gamma_rejects_negative_losses() -> None:
    with pytest.raises(ValueError, match="non-negative"):
        update_gamma(GammaState(gamma=0.0, r=0.01, e_target=0.5), lc_gen=-0.1, lc_real=0.5)


def test_gamma_history_is_bounded() -> None:
    state = GammaState(gamma=0.0, r=0.01, e_target=0.5, history_size=3)
    for value in range(5):
        state = update_gamma(state, float(value), 1.0)

    assert [gen for gen, _ in state.history] == [2.0, 3.0, 4.0]


def test_measured_ratio_of_equal_losses() -> None:
    state = GammaState(gamma=0.0, r=0.01, e_target=0.5, history=((0.4, 0.4),) * 10)

    assert measured_e_ratio(state, 10) == 1.0


def test_measured_ratio_half() -> None:
    state = GammaState(gamma=0.0, r=0.01, e_target=0.5, history=((9.0, 9.0),) + ((0.2, 0.4),) * 4)

    assert measured_e_ratio(state, 4) == pytest.approx(0.5)


def test_measured_ratio_needs_enough_history() -> None:
    state = GammaState(gamma=0.0, r=0.01, e_target=0.5, history=((0.2, 0.4),) * 3)

    with pytest.raises(InsufficientHistoryError):
        measured_e_ratio(state, 4)


def test_measured_ratio_undefined_for_zero_real_loss() -> None:
    state = GammaState(gamma=0.0, r=0.01, e_target=0.5, history=((0.2, 0.0),) * 3)

    with pytest.raises(UndefinedRatioError):
        measured_e_ratio(state, 3)


# Configuration


def test_config_rejects_window_longer_than_history() -> None:
    with pytest.raises(ValueError, match="e_window"):
        tiny_config(e_window=100, history_size=50)


def test_config_requires_paths_for_images() -> None:
    with pytest.raises(ValueError, match="dataset_path"):
        tiny_config(data="images")


def test_config_parses_residual_counts_from_text() -> None:
    assert tiny_config(residual_counts_g="3, 2,1").residual_counts_g == (3, 2, 1)


def test_cgan_discriminator_is_label_conditioned(config: TrainConfig) -> None:
    cgan = config.model_copy(update={"mode": TrainingMode.CGAN})

    assert model_spec(cgan, ModelRole.DISCRIMINATOR).label_conditioning
    assert not model_spec(config, ModelRole.DISCRIMINATOR).label_conditioning


def test_derived_seeds_differ_per_stream() -> None:
    assert derive_seed(0, "generator") == derive_seed(0, "generator")
    assert derive_seed(0, "generator") != derive_seed(0, "discriminator")
    assert derive_seed(0, "generator") != derive_seed(1, "generator")


def test_learning_rate_drops_after_decay_epoch() -> None:
    config = tiny_config(lr_main=1e-3, lr_late=1e-4, epochs_before_decay=1)

    assert learning_rate(config, 9, per_epoch=10) == 1e-3
    assert learning_rate(config, 10, per_epoch=10) == 1e-4


def test_prepare_data_splits_disjointly(split_data: tuple[LabeledDataset, LabeledDataset]) -> None:
    train_data, holdout = split_data

    assert len(train_data) == 120
    assert len(holdout) == 40
    assert train_data.descriptor.split == "train"
    assert not {tuple(row) for row in train_data.samples} & {tuple(row) for row in holdout.samples}
    assert np.abs(train_data.samples).max() <= 1.0


# Pretraining


def test_pretrain_with_zero_epochs_returns_initialization(train_data: LabeledDataset) -> None:
    config = tiny_config(pretrain_epochs=0)
    initial = build_model(model_spec(config, ModelRole.CLASSIFIER), derive_seed(config.seed, "classifier"))

    params = pretrain_classifier(config, train_data)

    assert params.checksum() == initial.checksum()
    assert params.frozen


def test_pretrain_is_deterministic(config: TrainConfig, train_data: LabeledDataset) -> None:
    first = pretrain_classifier(config, train_data)
    second = pretrain_classifier(config, train_data)

    assert first.checksum() == second.checksum()


def test_pretrain_rejects_empty_data(config: TrainConfig, train_data: LabeledDataset) -> None:
    empty = train_data.subset(np.array([], dtype=np.int64), "empty")

    with pytest.raises(ValueError, match="empty"):
        pretrain_classifier(config, empty)


# Single steps


def test_controlgan_needs_a_classifier(config: TrainConfig) -> None:
    with pytest.raises(ValueError, match="pretrained classifier"):
        init_state(config)


def test_discriminator_loss_is_ln2_for_an_undecided_discriminator(
    config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    state = init_state(config, theta_c)
    for _, tensor in state.params_d.items():
        tensor.values[:] = 0.0

    losses = discriminator_step(state, *_first_batch(train_data))

    assert losses.total == pytest.approx(math.log(2), abs=1e-12)
    assert losses.real == pytest.approx(math.log(2), abs=1e-12)


def test_discriminator_ignores_fakes_when_alpha_is_one(train_data: LabeledDataset, theta_c: ParamSet) -> None:
    config = tiny_config(alpha=1.0)
    first, second = init_state(config, theta_c), init_state(config, theta_c)
    for _, tensor in second.params_g.items():
        tensor.values *= -3.0

    losses = discriminator_step(first, *_first_batch(train_data))
    discriminator_step(second, *_first_batch(train_data))

    assert first.params_d.checksum() == second.params_d.checksum()
    assert losses.total == losses.real


def test_discriminator_step_touches_only_the_discriminator(
    config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    state = init_state(config, theta_c)
    before_g, before_d, before_c = state.params_g.checksum(), state.params_d.checksum(), theta_c.checksum()

    discriminator_step(state, *_first_batch(train_data))

    assert state.params_g.checksum() == before_g
    assert state.params_d.checksum() != before_d
    assert theta_c.checksum() == before_c
    assert state.adam_d.step_count == 1
    assert state.adam_g.step_count == 0


def test_discriminator_steps_are_deterministic(
    config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    first, second = init_state(config, theta_c), init_state(config, theta_c)
    for state in (first, second):
        discriminator_step(state, *_first_batch(train_data))
        discriminator_step(state, *_first_batch(train_data))

    assert first.params_d.checksum() == second.params_d.checksum()


def test_generator_step_touches_only_the_generator(
    config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    state = init_state(config, theta_c)
    state.gamma_state = GammaState(gamma=2.0, r=0.01, e_target=0.5)
    before_g, before_d, before_c = state.params_g.checksum(), state.params_d.checksum(), theta_c.checksum()

    losses = generator_step(state, train_data.labels[:16])

    assert state.params_g.checksum() != before_g
    assert state.params_d.checksum() == before_d
    assert theta_c.checksum() == before_c
    assert losses.classification > 0
    assert state.classifier_evaluations == 1


def test_zero_gamma_generator_step_is_a_vanilla_step(
    config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    controlled, vanilla = init_state(config, theta_c), init_state(config, theta_c)
    vanilla.params_c = None

    generator_step(controlled, train_data.labels[:16])
    generator_step(vanilla, train_data.labels[:16])

    assert controlled.gamma_state.gamma == 0.0
    assert controlled.params_g.checksum() == vanilla.params_g.checksum()
    assert vanilla.classifier_evaluations == 0


def test_generator_gradient_is_the_weighted_sum_of_its_parts(
    config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    state = init_state(config, theta_c)
    params_d, params_c = state.params_d.detached(), theta_c.detached()
    z = sample_noise(np.random.default_rng(0), 16, config.z_dim)
    labels = Tensor(train_data.labels[:16])

    def gradient(weight_c: float, weight_d: float) -> dict[str, np.ndarray]:
        state.params_g.zero_grad()
        with Tape() as tape:
            classification, adversarial = generator_objective(state.params_g, params_d, params_c, z, labels, 1.0)
            total = classification * weight_c + adversarial * weight_d
        tape.backward(total)
        return {name: np.array(tensor.grad) for name, tensor in state.params_g.items()}

    combined, classification_only, adversarial_only = gradient(2.5, 1.0), gradient(1.0, 0.0), gradient(0.0, 1.0)

    for name, grad in combined.items():
        np.testing.assert_allclose(grad, 2.5 * classification_only[name] + adversarial_only[name], atol=1e-6)


@pytest.mark.parametrize(("lc_gen", "direction"), [(0.5, 1), (0.2, 0), (0.1, -1)])
def test_gamma_moves_toward_the_target_ratio(lc_gen: float, direction: int) -> None:
    state = GammaState(gamma=1.0, r=0.1, e_target=0.5)

    updated = update_gamma(state, lc_gen=lc_gen, lc_real=0.4)

    assert np.sign(updated.gamma - state.gamma) == direction


# Full runs


def test_one_iteration_updates_gamma_after_the_generator_step(train_data: LabeledDataset, theta_c: ParamSet) -> None:
    config = tiny_config(iterations=1, gamma_init=0.7)
    manual = init_state(config, theta_c)
    samples, labels = next(batches(train_data, config.batch_size, derive_seed(config.seed, "batches"), 0))
    discriminator_step(manual, samples, labels)
    lc_real = real_classification_loss(manual, samples, labels)
    generated = generator_step(manual, labels)
    expected = update_gamma(manual.gamma_state, generated.classification, lc_real)

    state = train(config, train_data, theta_c)

    assert state.gamma_state == expected
    assert state.params_g.checksum() == manual.params_g.checksum()
    assert state.params_d.checksum() == manual.params_d.checksum()


def test_zero_iterations_leave_the_state_unchanged(train_data: LabeledDataset, theta_c: ParamSet) -> None:
    config = tiny_config(iterations=0)
    fresh = init_state(config, theta_c)

    state = train(config, train_data, theta_c)

    assert state.iteration == 0
    assert state.params_g.checksum() == fresh.params_g.checksum()
    assert state.params_d.checksum() == fresh.params_d.checksum()


def test_training_is_deterministic(config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet) -> None:
    first = train(config, train_data, theta_c)
    second = train(config, train_data, theta_c)

    assert first.iteration == second.iteration == 20
    assert first.params_g.checksum() == second.params_g.checksum()
    assert first.params_d.checksum() == second.params_d.checksum()
    assert first.gamma_state == second.gamma_state


def test_training_keeps_the_classifier_frozen(
    config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    checksum = theta_c.checksum()

    state = train(config, train_data, theta_c)

    assert state.params_c is not None
    assert state.params_c.checksum() == checksum
    assert state.adam_c is None
    assert state.classifier_evaluations == 20
    assert len(state.gamma_state.history) == 20


def test_joint_classifier_training_leaves_the_pretrained_copy_alone(
    train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    config = tiny_config(train_classifier_jointly=True, iterations=5)
    checksum = theta_c.checksum()

    state = train(config, train_data, theta_c)

    assert state.params_c is not None
    assert state.params_c.checksum() != checksum
    assert theta_c.checksum() == checksum


def test_metrics_are_emitted_on_the_log_interval(
    config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    collector = MetricsCollector()

    train(config, train_data, theta_c, callbacks=[collector])

    assert [record.iteration for record in collector.records] == [5, 10, 15, 20]
    assert all(record.gamma >= 0 for record in collector.records)
    assert math.isfinite(collector.records[-1].measured_e)


def test_metrics_csv_has_one_row_per_record(
    tmp_path: Path, config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet
) -> None:
    path = tmp_path / "metrics.csv"

    train(config, train_data, theta_c, callbacks=[MetricsCsvWriter(path)])

    with open(path, encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == METRIC_FIELDS
    assert [row[0] for row in rows[1:]] == ["5", "10", "15", "20"]


def test_metrics_csv_resume_drops_later_rows(tmp_path: Path) -> None:
    path = tmp_path / "metrics.csv"
    path.write_text(",".join(METRIC_FIELDS) + "\n5,1,1,1,1,0,1,1\n10,1,1,1,1,0,1,1\n", encoding="utf-8")

    MetricsCsvWriter(path, resume_from=5)

    assert path.read_text(encoding="utf-8").splitlines()[1:] == ["5,1,1,1,1,0,1,1"]


def test_divergence_aborts_with_the_iteration(
    config: TrainConfig, train_data: LabeledDataset, theta_c: ParamSet, caplog: pytest.LogCaptureFixture
) -> None:
    class AbortRecorder(TrainCallback):
        def __init__(self) -> None:
            self.aborted_at: int | None = None

        def on_abort(self, state: TrainState, error: Exception) -> None:
            self.aborted_at = state.iteration

    state = init_state(config, theta_c)
    state.iteration = 3
    state.params_g["out.bias"].values[:] = np.nan
    recorder = AbortRecorder()

    with pytest.raises(NumericalDivergenceError) as excinfo:
        train(config, train_data, theta_c, callbacks=[recorder], state=state)

    assert excinfo.value.iteration == 3
    assert recorder.aborted_at == 3
    errors = [record for record in caplog.records if record.levelname == "ERROR"]
    assert [record.name for record in errors] == ["control_gan.train_utils"]


def test_train_refuses_the_cgan_mode(train_data: LabeledDataset, theta_c: ParamSet) -> None:
    with pytest.raises(ValueError, match="train_cgan_baseline"):
        train(tiny_config(mode="cgan"), train_data, theta_c)


def test_cgan_baseline_never_consults_a_classifier(train_data: LabeledDataset) -> None:
    config = tiny_config(mode="cgan")
    collector = MetricsCollector()

    state = train_cgan_baseline(config, train_data, callbacks=[collector])

    assert state.params_c is None
    assert state.classifier_evaluations == 0
    assert state.gamma_state.history == ()
    assert state.params_d.spec.label_conditioning
    assert all(math.isnan(record.gamma) and math.isnan(record.loss_g_cls) for record in collector.records)
