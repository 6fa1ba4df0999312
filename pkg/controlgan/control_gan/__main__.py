import argparse
import csv
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from control_gan.checkpoint_utils import (
    Checkpoint,
    CheckpointError,
    CheckpointWriter,
    checkpoint_from_state,
    latest_checkpoint,
    load_checkpoint,
    save_checkpoint,
    state_from_checkpoint,
)
from control_gan.config_utils import ConfigError, load_config
from control_gan.data_utils import denormalize, sample_noise
from control_gan.eval_utils import (
    EvalReport,
    SweepSpec,
    emit_grid,
    emit_report,
    evaluate_generator,
    generate_label_grid,
    grid_shape,
    label_grid,
    sweep,
    sweep_rank_correlation,
    train_oracle,
)
from control_gan.gradcheck_utils import gradcheck_suite
from control_gan.model_utils import DataMode, ModelRole, generator_forward
from control_gan.tensor_utils import GradientCheck, precision
from control_gan.train_utils import (
    MetricsCsvWriter,
    NumericalDivergenceError,
    TrainConfig,
    TrainingMode,
    derive_seed,
    mean_classification_loss,
    prepare_data,
    pretrain_classifier,
    train,
    train_cgan_baseline,
)

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s %(levelname)s %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

DEFAULT_COMPARE_E = (0.05, 0.5, 1.0)


def parse_floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ValueError(f"Expected comma-separated numbers, got {text!r}") from e


def parse_labels(text: str, label_dim: int) -> np.ndarray:
    values = parse_floats(text)
    if len(values) != label_dim:
        raise ValueError(f"Expected {label_dim} labels, got {len(values)} in {text!r}")
    return np.array(values)


def cmd_pretrain(config_path: Path, out: Path, seed: int | None = None) -> Path:
    config = load_config(config_path, {"seed": seed})
    train_data, _ = prepare_data(config)
    theta_c = pretrain_classifier(config, train_data)
    loss = mean_classification_loss(theta_c, train_data)
    print(f"loss_c {loss:.6f}")
    checkpoint = Checkpoint(config=config, params={ModelRole.CLASSIFIER: theta_c}, descriptor=train_data.descriptor)
    return save_checkpoint(checkpoint, out)


def cmd_train(
    config_path: Path,
    out_dir: Path,
    classifier: Path | None = None,
    resume: bool = False,
    iterations: int | None = None,
    mode: str | None = None,
    seed: int | None = None,
) -> Path:
    config = load_config(config_path, {"seed": seed, "iterations": iterations, "mode": mode})
    train_data, _ = prepare_data(config)

    theta_c = None
    if config.mode == TrainingMode.CGAN:
        if classifier is not None:
            logger.warning(f"Ignoring classifier checkpoint {classifier}: mode cgan trains without a classifier")
    else:
        if classifier is None:
            raise ConfigError("mode controlgan needs a pretrained classifier (--classifier)")
        theta_c = load_checkpoint(classifier).require(ModelRole.CLASSIFIER)

    state, resume_from = None, None
    if resume:
        latest = latest_checkpoint(out_dir)
        if latest is None:
            logger.warning(f"No checkpoint in {out_dir}; starting from scratch")
        else:
            state = state_from_checkpoint(load_checkpoint(latest), config)
            resume_from = state.iteration
            logger.info(f"Resuming from {latest} at iteration {resume_from}")

    callbacks = [
        MetricsCsvWriter(out_dir / "metrics.csv", resume_from=resume_from),
        CheckpointWriter(out_dir, config.checkpoint_interval, train_data.descriptor),
    ]
    if config.mode == TrainingMode.CGAN:
        state = train_cgan_baseline(config, train_data, callbacks, state=state)
    else:
        state = train(config, train_data, theta_c, callbacks, state=state)
    return save_checkpoint(checkpoint_from_state(state, train_data.descriptor), out_dir / "final.ckpt")


def write_samples_csv(
    samples: np.ndarray, path: Path, leading: Sequence[str] = (), rows: Sequence[Sequence[str]] = ()
) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = samples.reshape(len(samples), -1)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([*leading, *(f"x{i}" for i in range(flat.shape[1]))])
        for index, sample in enumerate(flat):
            prefix = list(rows[index]) if rows else []
            writer.writerow([*prefix, *(f"{value:.6g}" for value in sample)])
    return path


def cmd_generate(checkpoint_path: Path, labels: str, n: int, out: Path, seed: int = 0) -> Path:
    if n <= 0:
        raise ValueError(f"--n must be positive, got {n}")
    checkpoint = load_checkpoint(checkpoint_path)
    generator = checkpoint.require(ModelRole.GENERATOR)
    label_row = parse_labels(labels, generator.spec.label_dim)
    rng = np.random.default_rng(derive_seed(seed, "generate"))
    with precision(generator.spec.precision):
        z = sample_noise(rng, n, generator.spec.z_dim)
        samples = generator_forward(generator.detached(), z, np.tile(label_row, (n, 1))).values
    if generator.spec.mode == DataMode.IMAGE:
        return emit_grid(samples, *grid_shape(n), out)
    if checkpoint.descriptor is not None:
        samples = denormalize(checkpoint.descriptor, samples)
    return write_samples_csv(samples, out)


def cmd_sweep(
    checkpoint_path: Path, label_index: int, out_dir: Path, values: str | None = None, n_z: int = 8, seed: int = 0
) -> Path:
    checkpoint = load_checkpoint(checkpoint_path)
    generator = checkpoint.require(ModelRole.GENERATOR)
    options = {"values": tuple(parse_floats(values))} if values else {}
    spec = SweepSpec(
        label_index=label_index, fixed_labels=(0.0,) * generator.spec.label_dim, n_z=n_z, seed=seed, **options
    )
    points = sweep(generator, spec, checkpoint.descriptor)
    out_dir.mkdir(parents=True, exist_ok=True)

    if generator.spec.mode == DataMode.IMAGE:
        # rows share a noise vector, columns share a label value
        stacked = np.stack([point.samples for point in points], axis=1)
        return emit_grid(stacked.reshape(-1, *stacked.shape[2:]), n_z, len(points), out_dir / "sweep.png")

    path = out_dir / "sweep_projections.csv"
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["value", "projection"])
        writer.writerows([[f"{p.value:g}", "" if p.projection is None else f"{p.projection:.6g}"] for p in points])
    samples = np.concatenate([point.samples for point in points])
    if checkpoint.descriptor is not None:
        samples = denormalize(checkpoint.descriptor, samples)
    keys = [(f"{point.value:g}", str(i)) for point in points for i in range(n_z)]
    write_samples_csv(samples, out_dir / "sweep_samples.csv", leading=("value", "z_index"), rows=keys)
    if all(point.projection is not None for point in points) and len(points) > 1:
        logger.info(f"Spearman correlation of label {label_index} sweep: {sweep_rank_correlation(points):.4f}")
    return path


def cmd_gradcheck(seed: int, trials: int = 20) -> list[GradientCheck]:
    rows = gradcheck_suite(seed, trials)
    print(f"{'operation':<18} {'max_abs_err':>12} {'max_rel_err':>12}  status")
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        print(f"{row.name:<18} {row.max_abs_error:>12.3e} {row.max_rel_error:>12.3e}  {status}")
    return rows


def cmd_evaluate(checkpoint_path: Path, out_dir: Path, n_z: int = 64) -> EvalReport:
    checkpoint = load_checkpoint(checkpoint_path)
    config = checkpoint.config
    generator = checkpoint.require(ModelRole.GENERATOR)
    _, holdout = prepare_data(config)
    oracle = train_oracle(holdout, config.seed, config)
    metrics = evaluate_generator(
        generator, oracle, holdout.descriptor, checkpoint.gamma_state, config.e_window, n_z=n_z, seed=config.seed
    )
    report = EvalReport(entries={checkpoint_path.stem: metrics})
    emit_report(report, out_dir / "report.csv")
    if generator.spec.mode == DataMode.IMAGE:
        columns = label_grid(generator.spec.label_dim)
        rows = 4
        samples = generate_label_grid(generator, columns, rows, seed=config.seed)
        emit_grid(samples, rows, len(columns), out_dir / "label_grid.png")
    return report


def _configuration_name(config: TrainConfig) -> str:
    if config.mode == TrainingMode.CGAN:
        return f"cgan_seed{config.seed}"
    return f"controlgan_E{config.e_target:g}_seed{config.seed}"


def cmd_compare(
    config_path: Path, out_dir: Path, seeds: Sequence[int], e_values: Sequence[float] = DEFAULT_COMPARE_E
) -> EvalReport:
    """Train every E value plus the conditional-GAN baseline for each seed and score them with one oracle per seed"""
    base = load_config(config_path)
    entries = {}
    for seed in seeds:
        seeded = TrainConfig.model_validate({**base.model_dump(), "seed": seed})
        train_data, holdout = prepare_data(seeded)
        oracle = train_oracle(holdout, seed, seeded)
        theta_c = pretrain_classifier(seeded, train_data)
        runs = [
            TrainConfig.model_validate({**seeded.model_dump(), "mode": TrainingMode.CONTROLGAN, "e_target": e})
            for e in e_values
        ]
        runs.append(TrainConfig.model_validate({**seeded.model_dump(), "mode": TrainingMode.CGAN}))
        for config in runs:
            name = _configuration_name(config)
            logger.info(f"Training {name}")
            if config.mode == TrainingMode.CGAN:
                state = train_cgan_baseline(config, train_data)
                gamma_state = None
            else:
                state = train(config, train_data, theta_c.copy())
                gamma_state = state.gamma_state
            entries[name] = evaluate_generator(
                state.params_g, oracle, train_data.descriptor, gamma_state, config.e_window, seed=seed
            )
            logger.info(f"{name}: oracle accuracy {entries[name].oracle_accuracy:.4f}")
    report = EvalReport(entries=entries)
    emit_report(report, out_dir / "compare.csv")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="control_gan", description="Controlled three-player GAN training")
    commands = parser.add_subparsers(dest="command", required=True)

    pretrain = commands.add_parser("pretrain", help="Pretrain the auxiliary classifier on real data")
    pretrain.add_argument("--config", type=Path, required=True)
    pretrain.add_argument("--out", type=Path, required=True, help="Classifier checkpoint to write")
    pretrain.add_argument("--seed", type=int)

    train_cmd = commands.add_parser("train", help="Train a generator (controlgan or cgan)")
    train_cmd.add_argument("--config", type=Path, required=True)
    train_cmd.add_argument("--classifier", type=Path, help="Pretrained classifier checkpoint")
    train_cmd.add_argument("--out", type=Path, required=True, help="Output directory")
    train_cmd.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint in --out")
    train_cmd.add_argument("--iterations", type=int)
    train_cmd.add_argument("--mode", choices=[mode.value for mode in TrainingMode])
    train_cmd.add_argument("--seed", type=int)

    generate = commands.add_parser("generate", help="Generate samples for one label vector")
    generate.add_argument("checkpoint", type=Path)
    generate.add_argument("--labels", required=True, help="Comma-separated label values")
    generate.add_argument("--n", type=int, default=16)
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--out", type=Path, required=True)

    sweep_cmd = commands.add_parser("sweep", help="Interpolate and extrapolate one label")
    sweep_cmd.add_argument("checkpoint", type=Path)
    sweep_cmd.add_argument("--label-index", type=int, required=True)
    sweep_cmd.add_argument("--values", help="Strictly increasing comma-separated values")
    sweep_cmd.add_argument("--n", type=int, default=8, help="Noise vectors (rows)")
    sweep_cmd.add_argument("--seed", type=int, default=0)
    sweep_cmd.add_argument("--out", type=Path, required=True, help="Output directory")

    gradcheck = commands.add_parser("gradcheck", help="Check analytic gradients against finite differences")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--trials", type=int, default=20)

    evaluate = commands.add_parser("evaluate", help="Score a generator checkpoint with an independent oracle")
    evaluate.add_argument("checkpoint", type=Path)
    evaluate.add_argument("--out", type=Path, required=True, help="Output directory")
    evaluate.add_argument("--n", type=int, default=64, help="Samples per label combination")

    compare = commands.add_parser("compare", help="Train the E grid and the cgan baseline and compare them")
    compare.add_argument("--config", type=Path, required=True)
    compare.add_argument("--out", type=Path, required=True, help="Output directory")
    compare.add_argument("--seeds", default="0,1,2", help="Comma-separated seeds")
    compare.add_argument("--e-values", default=",".join(f"{e:g}" for e in DEFAULT_COMPARE_E))
    return parser


def run(args: argparse.Namespace) -> int:
    match args.command:
        case "pretrain":
            cmd_pretrain(args.config, args.out, args.seed)
        case "train":
            cmd_train(args.config, args.out, args.classifier, args.resume, args.iterations, args.mode, args.seed)
        case "generate":
            cmd_generate(args.checkpoint, args.labels, args.n, args.out, args.seed)
        case "sweep":
            cmd_sweep(args.checkpoint, args.label_index, args.out, args.values, args.n, args.seed)
        case "gradcheck":
            rows = cmd_gradcheck(args.seed, args.trials)
            if not all(row.passed for row in rows):
                return EXIT_NUMERICAL
        case "evaluate":
            cmd_evaluate(args.checkpoint, args.out, args.n)
        case "compare":
            seeds = [int(seed) for seed in parse_floats(args.seeds)]
            cmd_compare(args.config, args.out, seeds, parse_floats(args.e_values))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ArithmeticError as e:
        if isinstance(e, NumericalDivergenceError):
            logging.error(f"Numerical divergence at iteration {e.iteration}: {e}")
        else:
            logging.error(f"Numerical failure: {e}", exc_info=True)
        return EXIT_NUMERICAL
    except (CheckpointError, OSError) as e:
        logging.error(f"I/O failure: {e}", exc_info=True)
        return EXIT_IO
    except (ConfigError, ValidationError, ValueError) as e:
        logging.error(f"Invalid input: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
