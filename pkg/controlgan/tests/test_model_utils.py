import numpy as np
import pytest
from conftest import tiny_spec
from pydantic import ValidationError

from control_gan.model_utils import (
    DataMode,
    ModelRole,
    ModelSpec,
    ParamSet,
    build_model,
    classifier_forward,
    discriminator_forward,
    expected_parameter_count,
    generator_forward,
    output_shape,
    parameter_shapes,
)
from control_gan.tensor_utils import ShapeError, Tape, Tensor, mean


def _shape_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for shape in parameter_shapes(spec).values())


def test_discriminator_head_is_one_wide() -> None:
    spec = ModelSpec(role=ModelRole.DISCRIMINATOR, label_dim=40)

    assert parameter_shapes(spec)["fc_out.weight"] == (128, 1)
    assert output_shape(spec) == ()


def test_classifier_head_has_one_output_per_label() -> None:
    spec = ModelSpec(role=ModelRole.CLASSIFIER, label_dim=40)

    assert parameter_shapes(spec)["fc_out.weight"] == (128, 40)
    assert output_shape(spec) == (40,)


def test_full_scale_generator_shapes() -> None:
    spec = ModelSpec(
        role=ModelRole.GENERATOR, z_dim=500, label_dim=40, spatial_scale=128, base_channels=64, channels=3
    )

    shapes = parameter_shapes(spec)

    assert output_shape(spec) == (128, 128, 3)
    assert shapes["fc_in.weight"] == (540, 32 * 32 * 64)
    assert shapes["out.weight"] == (64, 3, 5, 5)
    assert spec.residual_counts == (2, 4, 2)


def test_default_residual_counts_follow_role() -> None:
    assert ModelSpec(role=ModelRole.GENERATOR).residual_counts == (2, 4, 2)
    assert ModelSpec(role=ModelRole.CLASSIFIER).residual_counts == (2, 4, 4)
    assert ModelSpec(role=ModelRole.GENERATOR, residual_counts=(1, 1, 1)).residual_counts == (1, 1, 1)


@pytest.mark.parametrize("role", list(ModelRole))
@pytest.mark.parametrize("mode", list(DataMode))
def test_parameter_count_matches_closed_form(role: ModelRole, mode: DataMode) -> None:
    spec = tiny_spec(role, mode, residual_counts=(2, 1, 3))

    assert expected_parameter_count(spec) == _shape_count(spec)
    assert build_model(spec, seed=1).count() == expected_parameter_count(spec)


def test_parameter_count_with_label_conditioning() -> None:
    spec = tiny_spec(ModelRole.DISCRIMINATOR, label_conditioning=True, label_dim=5)

    assert expected_parameter_count(spec) == _shape_count(spec)
    assert parameter_shapes(spec)["fc_hidden.weight"][0] == 2 + 5


def test_full_scale_counts_match_closed_form() -> None:
    for role in ModelRole:
        spec = ModelSpec(role=role, z_dim=500, label_dim=40, spatial_scale=128, base_channels=64, channels=3)
        assert expected_parameter_count(spec) == _shape_count(spec)


@pytest.mark.parametrize(
    ("overrides", "message"),
    [
        ({"spatial_scale": 12}, "power of two"),
        ({"spatial_scale": 4}, "power of two"),
        ({"residual_counts": (1, 0, 1)}, "residual_counts"),
        ({"conv_kernel": 1}, "conv_kernel"),
        ({"base_channels": 0}, "base_channels"),
    ],
)
def test_invalid_spec_names_the_problem(overrides: dict, message: str) -> None:
    with pytest.raises(ValidationError, match=message):
        tiny_spec(ModelRole.GENERATOR, **overrides)


def test_label_conditioning_is_discriminator_only() -> None:
    with pytest.raises(ValidationError, match="label_conditioning"):
        tiny_spec(ModelRole.CLASSIFIER, label_conditioning=True)


def test_build_is_deterministic_per_seed() -> None:
    spec = tiny_spec(ModelRole.CLASSIFIER)

    assert build_model(spec, seed=7).checksum() == build_model(spec, seed=7).checksum()
    assert build_model(spec, seed=7).checksum() != build_model(spec, seed=8).checksum()


def test_biases_start_at_zero() -> None:
    params = build_model(tiny_spec(ModelRole.DISCRIMINATOR), seed=0)

    for name, tensor in params.items():
        if name.endswith(".bias"):
            assert not tensor.values.any()
        else:
            assert tensor.values.any()


def test_build_respects_precision() -> None:
    params = build_model(tiny_spec(ModelRole.GENERATOR, precision="float32"), seed=0)

    assert all(tensor.values.dtype == np.float32 for _, tensor in params.items())


def test_param_set_rejects_wrong_shapes() -> None:
    spec = tiny_spec(ModelRole.CLASSIFIER)
    tensors = dict(build_model(spec, seed=0).items())
    tensors["fc_out.bias"] = Tensor(np.zeros(3))

    with pytest.raises(ShapeError, match="fc_out.bias"):
        ParamSet(spec, tensors, init_seed=0)


def test_generator_output_on_zero_noise_is_finite() -> None:
    params = build_model(tiny_spec(ModelRole.GENERATOR), seed=0)

    out = generator_forward(params, np.zeros((2, 3)), np.array([[1.0, 0.0], [0.0, 1.0]]))

    assert out.shape == (2, 8, 8, 1)
    assert np.isfinite(out.values).all()


def test_generator_is_deterministic() -> None:
    params = build_model(tiny_spec(ModelRole.GENERATOR), seed=0)
    z = np.random.default_rng(0).uniform(-1, 1, size=(4, 3))
    labels = np.ones((4, 2))

    first = generator_forward(params, z, labels).values
    second = generator_forward(params, z, labels).values

    np.testing.assert_array_equal(first, second)


def test_generator_batch_shape_at_scale_32() -> None:
    spec = tiny_spec(ModelRole.GENERATOR, spatial_scale=32, channels=3)
    params = build_model(spec, seed=0)
    z = np.random.default_rng(1).uniform(-1, 1, size=(16, 3))

    out = generator_forward(params, z, np.zeros((16, 2))).values

    assert out.shape == (16, 32, 32, 3)
    assert np.all(np.abs(out) <= 1.0)


def test_vector_generator_shape() -> None:
    params = build_model(tiny_spec(ModelRole.GENERATOR, DataMode.VECTOR), seed=0)

    out = generator_forward(params, np.zeros((5, 3)), np.zeros((5, 2)))

    assert out.shape == (5, 3)


def test_generator_rejects_wrong_label_width() -> None:
    params = build_model(tiny_spec(ModelRole.GENERATOR), seed=0)

    with pytest.raises(ShapeError, match="labels"):
        generator_forward(params, np.zeros((2, 3)), np.zeros((2, 4)))


def test_forward_checks_role() -> None:
    params = build_model(tiny_spec(ModelRole.CLASSIFIER), seed=0)

    with pytest.raises(ValueError, match="discriminator parameters"):
        discriminator_forward(params, np.zeros((1, 8, 8, 1)))


def test_discriminator_scores_are_per_sample() -> None:
    params = build_model(tiny_spec(ModelRole.DISCRIMINATOR), seed=0)
    x = np.random.default_rng(2).uniform(-1, 1, size=(8, 8, 8, 1))
    x[3] = x[5]

    scores = discriminator_forward(params, x).values

    assert scores.shape == (8,)
    assert np.all((scores > 0) & (scores < 1))
    assert scores[3] == pytest.approx(scores[5], rel=1e-12)


def test_discriminator_rejects_wrong_sample_shape() -> None:
    params = build_model(tiny_spec(ModelRole.DISCRIMINATOR), seed=0)

    with pytest.raises(ShapeError, match="samples"):
        discriminator_forward(params, np.zeros((2, 16, 16, 1)))


def test_label_conditioned_discriminator_needs_labels() -> None:
    params = build_model(tiny_spec(ModelRole.DISCRIMINATOR, label_conditioning=True), seed=0)
    x = np.zeros((3, 8, 8, 1))

    assert discriminator_forward(params, x, np.ones((3, 2))).shape == (3,)
    with pytest.raises(ValueError, match="labels are required"):
        discriminator_forward(params, x)


def test_plain_discriminator_refuses_labels() -> None:
    params = build_model(tiny_spec(ModelRole.DISCRIMINATOR), seed=0)

    with pytest.raises(ValueError, match="not label-conditioned"):
        discriminator_forward(params, np.zeros((1, 8, 8, 1)), np.ones((1, 2)))


@pytest.mark.parametrize("mode", list(DataMode))
def test_classifier_outputs_probabilities(mode: DataMode) -> None:
    spec = tiny_spec(ModelRole.CLASSIFIER, mode, label_dim=4)
    params = build_model(spec, seed=0)
    x = np.random.default_rng(3).uniform(-1, 1, size=(6, *((8, 8, 1) if mode == DataMode.IMAGE else (3,))))

    probs = classifier_forward(params, x).values

    assert probs.shape == (6, 4)
    assert np.all((probs > 0) & (probs < 1))


@pytest.mark.parametrize("role", list(ModelRole))
def test_every_parameter_receives_a_gradient(role: ModelRole) -> None:
    params = build_model(tiny_spec(role), seed=0)
    rng = np.random.default_rng(4)
    images = rng.uniform(-1, 1, size=(3, 8, 8, 1))
    with Tape() as tape:
        if role == ModelRole.GENERATOR:
            out = generator_forward(params, rng.uniform(-1, 1, size=(3, 3)), np.ones((3, 2)))
        elif role == ModelRole.DISCRIMINATOR:
            out = discriminator_forward(params, images)
        else:
            out = classifier_forward(params, images)
        loss = mean(out)
    tape.backward(loss)

    for name, tensor in params.items():
        assert tensor.grad is not None, name
        assert tensor.grad.shape == tensor.shape
        assert np.any(tensor.grad != 0), name


@pytest.mark.parametrize("mode", list(DataMode))
def test_classifier_rows_follow_a_batch_permutation(mode: DataMode) -> None:
    params = build_model(tiny_spec(ModelRole.CLASSIFIER, mode, label_dim=3), seed=2)
    x = np.random.default_rng(5).uniform(-1, 1, size=(5, *((8, 8, 1) if mode == DataMode.IMAGE else (3,))))
    permutation = np.array([3, 0, 4, 2, 1])

    probs = classifier_forward(params, x).values

    np.testing.assert_allclose(classifier_forward(params, x[permutation]).values, probs[permutation], atol=1e-12)


def test_detached_params_share_values_but_take_no_gradient() -> None:
    params = build_model(tiny_spec(ModelRole.CLASSIFIER), seed=0)
    frozen = params.detached()
    x = np.zeros((2, 8, 8, 1))
    with Tape() as tape:
        loss = mean(classifier_forward(frozen, Tensor(x, requires_grad=True)))
    tape.backward(loss)

    assert frozen.frozen
    assert frozen.checksum() == params.checksum()
    assert all(tensor.grad is None for _, tensor in frozen.items())
    assert all(tensor.grad is None for _, tensor in params.items())
