"""End-to-end runs on the synthetic 2-D, 2-label task. Minutes each; select with ``-m slow``."""

import numpy as np
import pytest

from control_gan.__main__ import cmd_compare, cmd_gradcheck
from control_gan.config_utils import format_config
from control_gan.data_utils import LabeledDataset
from control_gan.eval_utils import EvalReport, SweepSpec, sweep, sweep_rank_correlation
from control_gan.train_utils import (
    TrainConfig,
    TrainState,
    mean_classification_loss,
    measured_e_ratio,
    prepare_data,
    pretrain_classifier,
    train,
)

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def long_run_config(**overrides: object) -> TrainConfig:
    values = {"iterations": 5000, "noise_sigma": 0.15, "synthetic_spread": 0.4, "samples_per_combo": 2000}
    return TrainConfig.model_validate({**values, **overrides})


def _train(config: TrainConfig) -> tuple[TrainState, LabeledDataset]:
    train_data, _ = prepare_data(config)
    return train(config, train_data, pretrain_classifier(config, train_data)), train_data


@pytest.fixture(scope="module")
def focused_run() -> tuple[TrainState, LabeledDataset]:
    return _train(long_run_config(e_target=0.05))


@pytest.fixture(scope="module")
def comparison(tmp_path_factory: pytest.TempPathFactory) -> EvalReport:
    directory = tmp_path_factory.mktemp("compare")
    config_path = directory / "run.cfg"
    config_path.write_text(format_config(long_run_config()), encoding="utf-8")
    return cmd_compare(config_path, directory, seeds=SEEDS)


def test_gradients_match_finite_differences() -> None:
    rows = cmd_gradcheck(seed=0, trials=20)

    assert all(row.passed for row in rows), [row.name for row in rows if not row.passed]


def test_pretrained_classifier_fits_separable_data() -> None:
    config = long_run_config(synthetic_spread=0.0)
    train_data, _ = prepare_data(config)

    theta_c = pretrain_classifier(config, train_data)

    assert mean_classification_loss(theta_c, train_data) < 0.1


def test_ratio_tracks_a_loose_target() -> None:
    state, _ = _train(long_run_config(e_target=0.5))

    assert 0.4 <= measured_e_ratio(state.gamma_state, 500) <= 0.6


def test_real_classification_loss_leaves_the_controller_a_signal(
    focused_run: tuple[TrainState, LabeledDataset],
) -> None:
    state, _ = focused_run

    real = np.array([lc_real for _, lc_real in state.gamma_state.history[-500:]])

    # gamma steps scale with lc_real
    assert 0.05 <= real.mean() <= 0.5


def test_ratio_tracks_a_tight_target(focused_run: tuple[TrainState, LabeledDataset]) -> None:
    state, _ = focused_run

    assert 0.03 <= measured_e_ratio(state.gamma_state, 500) <= 0.10


def test_label_sweep_is_monotone_and_extrapolates(focused_run: tuple[TrainState, LabeledDataset]) -> None:
    state, train_data = focused_run
    spec = SweepSpec(label_index=0, fixed_labels=(0.0, 0.0), n_z=64)

    points = sweep(state.params_g, spec, train_data.descriptor)

    projections = {point.value: point.projection for point in points}
    assert sweep_rank_correlation(points) >= 0.9
    assert projections[-1.0] < projections[0.0]


def test_controlled_generator_beats_the_conditional_baseline(comparison: EvalReport) -> None:
    wins = 0
    for seed in SEEDS:
        focused = comparison.entries[f"controlgan_E0.05_seed{seed}"].oracle_accuracy
        baseline = comparison.entries[f"cgan_seed{seed}"].oracle_accuracy
        wins += focused >= 0.9 and focused > baseline

    assert wins >= 2


def test_lower_targets_give_more_label_focused_samples(comparison: EvalReport) -> None:
    monotone = 0
    for seed in SEEDS:
        losses = [comparison.entries[f"controlgan_E{e:g}_seed{seed}"].oracle_loss for e in (1.0, 0.5, 0.05)]
        monotone += losses[0] >= losses[1] >= losses[2]

    assert monotone >= 2


def test_structural_checks_hold_over_a_smoke_run() -> None:
    config = long_run_config(iterations=100)
    train_data, _ = prepare_data(config)
    theta_c = pretrain_classifier(config, train_data)
    checksum = theta_c.checksum()

    state = train(config, train_data, theta_c)

    assert state.params_c is not None
    assert state.params_c.checksum() == checksum
    assert state.classifier_evaluations == 100
    assert len(state.gamma_state.history) == 100
