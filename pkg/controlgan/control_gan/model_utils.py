import hashlib
import logging
from collections.abc import Callable, Iterator
from enum import StrEnum
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from control_gan.tensor_utils import (
    Array,
    ShapeError,
    Tensor,
    as_tensor,
    avg_pool2d,
    concat,
    conv2d,
    conv_transpose2d,
    leaky_relu,
    matmul,
    precision,
    reshape,
    sigmoid,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)

Precision = Literal["float64", "float32"]


class ModelRole(StrEnum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"
    CLASSIFIER = "classifier"


class DataMode(StrEnum):
    IMAGE = "image"
    VECTOR = "vector"


DEFAULT_RESIDUAL_COUNTS: dict[ModelRole, tuple[int, int, int]] = {
    ModelRole.GENERATOR: (2, 4, 2),
    ModelRole.DISCRIMINATOR: (2, 4, 4),
    ModelRole.CLASSIFIER: (2, 4, 4),
}


class ModelSpec(BaseModel):
    """
    Architecture hyperparameters for one of the three networks.

    In image mode ``spatial_scale`` is the side of the square image; in vector
    mode it is the sample dimension and every convolution becomes a dense layer.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    role: ModelRole
    mode: DataMode = DataMode.IMAGE
    base_channels: int = Field(16, gt=0)
    spatial_scale: int = Field(32, gt=0)
    channels: int = Field(1, gt=0)
    residual_counts: tuple[int, int, int] = (2, 4, 4)
    z_dim: int = Field(32, gt=0)
    label_dim: int = Field(2, gt=0)
    conv_kernel: int = Field(5, gt=0)
    residual_kernel: int = Field(3, gt=0)
    head_width: int = Field(128, gt=0)
    leaky_slope: float = Field(0.1, ge=0)
    label_conditioning: bool = False
    precision: Precision = "float64"

    @model_validator(mode="before")
    @classmethod
    def default_residual_counts(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("residual_counts") is None and "role" in data:
            data = {**data, "residual_counts": DEFAULT_RESIDUAL_COUNTS[ModelRole(data["role"])]}
        return data

    @model_validator(mode="after")
    def check_architecture(self) -> "ModelSpec":
        if self.mode == DataMode.IMAGE:
            scale = self.spatial_scale
            if scale < 8 or scale & (scale - 1):
                raise ValueError(f"spatial_scale must be a power of two >= 8 in image mode, got {scale}")
            if self.conv_kernel < 2:
                raise ValueError(f"conv_kernel must be >= 2 for stride-2 layers, got {self.conv_kernel}")
        if any(count < 1 for count in self.residual_counts):
            raise ValueError(f"residual_counts must all be >= 1, got {self.residual_counts}")
        if self.label_conditioning and self.role != ModelRole.DISCRIMINATOR:
            raise ValueError("label_conditioning only applies to the discriminator")
        return self

    @property
    def output_width(self) -> int:
        """Width of the head: 1 realness score or one probability per label"""
        return 1 if self.role == ModelRole.DISCRIMINATOR else self.label_dim


def output_shape(spec: ModelSpec) -> tuple[int, ...]:
    """Per-sample output shape of the network described by ``spec``"""
    if spec.role == ModelRole.GENERATOR:
        if spec.mode == DataMode.IMAGE:
            return (spec.spatial_scale, spec.spatial_scale, spec.channels)
        return (spec.spatial_scale,)
    if spec.role == ModelRole.DISCRIMINATOR:
        return ()
    return (spec.label_dim,)


def sample_shape(spec: ModelSpec) -> tuple[int, ...]:
    """Per-sample shape of the data the network reads or writes"""
    if spec.mode == DataMode.IMAGE:
        return (spec.spatial_scale, spec.spatial_scale, spec.channels)
    return (spec.spatial_scale,)


def _final_side(spec: ModelSpec) -> int:
    side = spec.spatial_scale // 2
    for _ in range(3):
        if side > 1:
            side //= 2
    return side


def _residual_shapes(spec: ModelSpec, deconv: bool) -> Iterator[tuple[str, tuple[int, ...]]]:
    c, k = spec.base_channels, spec.residual_kernel
    weight = (c, c, k, k) if spec.mode == DataMode.IMAGE else (c, c)
    for stage, count in enumerate(spec.residual_counts, start=1):
        for block in range(count):
            for layer in ("conv1", "conv2"):
                yield f"res{stage}.{block}.{layer}.weight", weight
                yield f"res{stage}.{block}.{layer}.bias", (c,)
        if deconv and stage < 3:
            up = (c, c, spec.conv_kernel, spec.conv_kernel) if spec.mode == DataMode.IMAGE else (c, c)
            yield f"up{stage}.weight", up
            yield f"up{stage}.bias", (c,)


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes, without allocating anything"""
    c, k = spec.base_channels, spec.conv_kernel
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.role == ModelRole.GENERATOR:
        width = (spec.spatial_scale // 4) ** 2 * c if spec.mode == DataMode.IMAGE else c
        shapes["fc_in.weight"] = (spec.z_dim + spec.label_dim, width)
        shapes["fc_in.bias"] = (width,)
        shapes.update(_residual_shapes(spec, deconv=True))
        if spec.mode == DataMode.IMAGE:
            shapes["out.weight"] = (c, spec.channels, k, k)
            shapes["out.bias"] = (spec.channels,)
        else:
            shapes["out.weight"] = (c, spec.spatial_scale)
            shapes["out.bias"] = (spec.spatial_scale,)
        return shapes

    if spec.mode == DataMode.IMAGE:
        shapes["stem.weight"] = (c, spec.channels, k, k)
        flat = c * _final_side(spec) ** 2
    else:
        shapes["stem.weight"] = (spec.spatial_scale, c)
        flat = c
    shapes["stem.bias"] = (c,)
    shapes.update(_residual_shapes(spec, deconv=False))
    extra = spec.label_dim if spec.label_conditioning else 0
    shapes["fc_hidden.weight"] = (flat + extra, spec.head_width)
    shapes["fc_hidden.bias"] = (spec.head_width,)
    shapes["fc_out.weight"] = (spec.head_width, spec.output_width)
    shapes["fc_out.bias"] = (spec.output_width,)
    return shapes


def expected_parameter_count(spec: ModelSpec) -> int:
    """Closed-form parameter count of the architecture"""
    c, k, kr = spec.base_channels, spec.conv_kernel, spec.residual_kernel
    image = spec.mode == DataMode.IMAGE
    blocks = sum(spec.residual_counts)
    residual = blocks * 2 * ((c * c * kr * kr if image else c * c) + c)
    if spec.role == ModelRole.GENERATOR:
        width = (spec.spatial_scale // 4) ** 2 * c if image else c
        first = (spec.z_dim + spec.label_dim + 1) * width
        ups = 2 * ((c * c * k * k if image else c * c) + c)
        last = c * spec.channels * k * k + spec.channels if image else (c + 1) * spec.spatial_scale
        return first + residual + ups + last
    stem = c * spec.channels * k * k + c if image else (spec.spatial_scale + 1) * c
    flat = c * _final_side(spec) ** 2 if image else c
    extra = spec.label_dim if spec.label_conditioning else 0
    head = (flat + extra + 1) * spec.head_width + (spec.head_width + 1) * spec.output_width
    return stem + residual + head


class ParamSet:
    """Named, ordered parameter tensors of one network plus the seed that built them."""

    def __init__(self, spec: ModelSpec, tensors: dict[str, Tensor], init_seed: int, frozen: bool = False) -> None:
        expected = parameter_shapes(spec)
        if list(tensors) != list(expected):
            raise ValueError(f"Parameter names do not match the {spec.role} architecture")
        for name, tensor in tensors.items():
            if tensor.shape != expected[name]:
                raise ShapeError(f"Parameter {name} has shape {tensor.shape}, architecture expects {expected[name]}")
        self.spec = spec
        self.tensors = tensors
        self.init_seed = init_seed
        self.frozen = frozen

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def count(self) -> int:
        return sum(tensor.size for tensor in self.tensors.values())

    def detached(self) -> "ParamSet":
        """Constant view sharing the same values; nothing flows back into it"""
        tensors = {name: tensor.detach() for name, tensor in self.tensors.items()}
        return ParamSet(self.spec, tensors, self.init_seed, frozen=True)

    def copy(self) -> "ParamSet":
        tensors = {
            name: Tensor(tensor.values.copy(), requires_grad=tensor.requires_grad, dtype=tensor.values.dtype)
            for name, tensor in self.tensors.items()
        }
        return ParamSet(self.spec, tensors, self.init_seed, frozen=self.frozen)

    def freeze(self) -> "ParamSet":
        self.frozen = True
        for tensor in self.tensors.values():
            tensor.grad = None
        return self

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.grad = None

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.tensors.items():
            digest.update(name.encode())
            digest.update(str(tensor.values.dtype).encode())
            digest.update(np.ascontiguousarray(tensor.values).tobytes())
        return digest.hexdigest()


def _init_scale(shape: tuple[int, ...]) -> float:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return float(np.sqrt(6.0 / ((shape[0] + shape[1]) * receptive)))


def build_model(spec: ModelSpec, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases; bit-identical for the same (spec, seed)"""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    with precision(spec.precision):
        for name, shape in parameter_shapes(spec).items():
            if name.endswith(".bias"):
                values = np.zeros(shape)
            else:
                limit = _init_scale(shape)
                values = rng.uniform(-limit, limit, size=shape)
            tensors[name] = Tensor(values, requires_grad=True)
    params = ParamSet(spec, tensors, init_seed=seed)
    logger.debug(f"Built {spec.role} ({spec.mode}) with {params.count()} parameters from seed {seed}")
    return params


# Forward passes

Layer = Callable[[Tensor, Tensor, Tensor], Tensor]


def _dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return matmul(x, weight) + bias


def _residual_stage(params: ParamSet, x: Tensor, stage: int, layer: Layer) -> Tensor:
    slope = params.spec.leaky_slope
    for block in range(params.spec.residual_counts[stage - 1]):
        prefix = f"res{stage}.{block}"
        h = layer(leaky_relu(x, slope), params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"])
        h = layer(leaky_relu(h, slope), params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"])
        x = x + h
    return x


def _check_batch(name: str, value: Tensor, trailing: tuple[int, ...]) -> None:
    if value.ndim != len(trailing) + 1 or value.shape[1:] != trailing:
        raise ShapeError(f"{name} must have shape (batch, {', '.join(map(str, trailing))}), got {value.shape}")


def generator_forward(params: ParamSet, z: Tensor | Array, labels: Tensor | Array) -> Tensor:
    """Map (noise, labels) to samples in [-1, 1]; images come back as (batch, side, side, channels)"""
    spec = params.spec
    if spec.role != ModelRole.GENERATOR:
        raise ValueError(f"generator_forward needs generator parameters, got {spec.role}")
    z, labels = as_tensor(z), as_tensor(labels)
    _check_batch("z", z, (spec.z_dim,))
    _check_batch("labels", labels, (spec.label_dim,))
    if z.shape[0] != labels.shape[0]:
        raise ShapeError(f"z and labels disagree on batch size: {z.shape[0]} vs {labels.shape[0]}")

    slope = spec.leaky_slope
    h = _dense(concat([z, labels], axis=1), params["fc_in.weight"], params["fc_in.bias"])
    if spec.mode == DataMode.VECTOR:
        for stage in (1, 2):
            h = _residual_stage(params, h, stage, _dense)
            h = _dense(leaky_relu(h, slope), params[f"up{stage}.weight"], params[f"up{stage}.bias"])
        h = _residual_stage(params, h, 3, _dense)
        return tanh(_dense(leaky_relu(h, slope), params["out.weight"], params["out.bias"]))

    def deconv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        return conv_transpose2d(x, weight, bias, stride=1, padding="same")

    side = spec.spatial_scale // 4
    h = reshape(h, (z.shape[0], spec.base_channels, side, side))
    for stage in (1, 2):
        h = _residual_stage(params, h, stage, deconv)
        h = conv_transpose2d(leaky_relu(h, slope), params[f"up{stage}.weight"], params[f"up{stage}.bias"], stride=2)
    h = _residual_stage(params, h, 3, deconv)
    h = conv_transpose2d(leaky_relu(h, slope), params["out.weight"], params["out.bias"], stride=1)
    return transpose(tanh(h), (0, 2, 3, 1))


def _critic_features(params: ParamSet, x: Tensor) -> Tensor:
    spec = params.spec
    _check_batch("samples", x, sample_shape(spec))
    slope = spec.leaky_slope
    if spec.mode == DataMode.VECTOR:
        h = _dense(x, params["stem.weight"], params["stem.bias"])
        for stage in (1, 2, 3):
            h = _residual_stage(params, h, stage, _dense)
        return leaky_relu(h, slope)

    def conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        return conv2d(x, weight, bias, stride=1, padding="same")

    h = conv2d(transpose(x, (0, 3, 1, 2)), params["stem.weight"], params["stem.bias"], stride=2)
    for stage in (1, 2, 3):
        h = _residual_stage(params, h, stage, conv)
        if h.shape[2] > 1:
            h = avg_pool2d(h, 2)
    return reshape(leaky_relu(h, slope), (x.shape[0], -1))


def _head(params: ParamSet, features: Tensor) -> Tensor:
    h = leaky_relu(_dense(features, params["fc_hidden.weight"], params["fc_hidden.bias"]), params.spec.leaky_slope)
    return sigmoid(_dense(h, params["fc_out.weight"], params["fc_out.bias"]))


def discriminator_forward(params: ParamSet, x: Tensor | Array, labels: Tensor | Array | None = None) -> Tensor:
    """Realness score in (0, 1) per sample, shape (batch,)"""
    spec = params.spec
    if spec.role != ModelRole.DISCRIMINATOR:
        raise ValueError(f"discriminator_forward needs discriminator parameters, got {spec.role}")
    x = as_tensor(x)
    features = _critic_features(params, x)
    if spec.label_conditioning:
        if labels is None:
            raise ValueError("This discriminator is label-conditioned; labels are required")
        labels = as_tensor(labels)
        _check_batch("labels", labels, (spec.label_dim,))
        features = concat([features, labels], axis=1)
    elif labels is not None:
        raise ValueError("This discriminator is not label-conditioned; do not pass labels")
    return reshape(_head(params, features), (x.shape[0],))


def classifier_forward(params: ParamSet, x: Tensor | Array) -> Tensor:
    """Independent per-label probabilities, shape (batch, label_dim)"""
    if params.spec.role != ModelRole.CLASSIFIER:
        raise ValueError(f"classifier_forward needs classifier parameters, got {params.spec.role}")
    return _head(params, _critic_features(params, as_tensor(x)))
