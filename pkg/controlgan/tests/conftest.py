from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from control_gan.config_utils import format_config
from control_gan.data_utils import LabeledDataset
from control_gan.model_utils import DataMode, ModelRole, ModelSpec
from control_gan.train_utils import TrainConfig, prepare_data


def tiny_config(**overrides: object) -> TrainConfig:
    values = {
        "seed": 0,
        "batch_size": 16,
        "z_dim": 4,
        "base_channels": 4,
        "head_width": 8,
        "residual_counts_g": (1, 1, 1),
        "residual_counts_d": (1, 1, 1),
        "samples_per_combo": 40,
        "noise_sigma": 0.1,
        "log_interval": 5,
        "checkpoint_interval": 10,
        "e_window": 10,
        "history_size": 50,
        "pretrain_epochs": 1.0,
        "oracle_epochs": 1.0,
        "iterations": 20,
    }
    values.update(overrides)
    return TrainConfig.model_validate(values)


def tiny_spec(role: ModelRole, mode: DataMode = DataMode.IMAGE, **overrides: object) -> ModelSpec:
    values = {
        "role": role,
        "mode": mode,
        "base_channels": 2,
        "spatial_scale": 8 if mode == DataMode.IMAGE else 3,
        "residual_counts": (1, 1, 1),
        "z_dim": 3,
        "label_dim": 2,
        "head_width": 4,
    }
    values.update(overrides)
    return ModelSpec.model_validate(values)


@pytest.fixture
def config() -> TrainConfig:
    return tiny_config()


@pytest.fixture
def split_data(config: TrainConfig) -> tuple[LabeledDataset, LabeledDataset]:
    return prepare_data(config)


@pytest.fixture
def train_data(split_data: tuple[LabeledDataset, LabeledDataset]) -> LabeledDataset:
    return split_data[0]


def write_image_dataset(directory: Path, count: int = 10, side: int = 8) -> Path:
    """Grayscale images whose brightness encodes two binary labels; returns the label file"""
    directory.mkdir(parents=True, exist_ok=True)
    rows = ["filename,bright,striped"]
    for index in range(count):
        bright, striped = index % 2, (index // 2) % 2
        pixels = np.full((side, side), 200 if bright else 30, dtype=np.uint8)
        if striped:
            pixels[::2] = 0
        Image.fromarray(pixels).save(directory / f"img_{index:03d}.png")
        rows.append(f"img_{index:03d}.png,{bright},{striped}")
    label_file = directory / "labels.csv"
    label_file.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return label_file


def write_config(directory: Path, **overrides: object) -> Path:
    path = directory / "run.cfg"
    path.write_text(format_config(tiny_config(**overrides)), encoding="utf-8")
    return path
