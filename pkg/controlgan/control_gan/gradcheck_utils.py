import logging
from collections.abc import Callable

import numpy as np

from control_gan import tensor_utils as tu
from control_gan.loss_utils import loss_c, loss_d
from control_gan.tensor_utils import GradientCheck, Tensor, check_gradient

logger = logging.getLogger(__name__)

Forward = Callable[..., Tensor]


def _away_from(values: np.ndarray, points: tuple[float, ...], margin: float = 1e-2) -> np.ndarray:
    for point in points:
        values = np.where(np.abs(values - point) < margin, point + 2 * margin, values)
    return values


def _cases(rng: np.random.Generator, trial: int) -> dict[str, tuple[Forward, list[Tensor]]]:
    def draw(*shape: int) -> Tensor:
        return Tensor(rng.normal(size=shape))

    stride = 1 + trial % 2
    padding = "valid" if trial % 3 == 0 else "same"
    labels = rng.integers(0, 2, size=(4, 3)).astype(np.float64)
    target = float(trial % 2)

    return {
        "add": (tu.add, [draw(3, 4), draw(4)]),
        "sub": (tu.sub, [draw(3, 4), draw(3, 1)]),
        "mul": (tu.mul, [draw(3, 4), draw(4)]),
        "scale": (lambda x: tu.scale(x, -1.7), [draw(5)]),
        "matmul": (tu.matmul, [draw(3, 4), draw(4, 2)]),
        "conv2d": (
            lambda x, w, b: tu.conv2d(x, w, b, stride=stride, padding=padding),
            [draw(2, 2, 6, 6), draw(3, 2, 3, 3), draw(3)],
        ),
        "conv_transpose2d": (
            lambda x, w, b: tu.conv_transpose2d(x, w, b, stride=stride, padding=padding),
            [draw(2, 3, 3, 3), draw(3, 2, 3, 3), draw(2)],
        ),
        "avg_pool2d": (lambda x: tu.avg_pool2d(x, 2), [draw(2, 2, 4, 4)]),
        "leaky_relu": (lambda x: tu.leaky_relu(x, 0.1), [Tensor(_away_from(rng.normal(size=(4, 5)), (0.0,)))]),
        "sigmoid": (tu.sigmoid, [draw(4, 5)]),
        "tanh": (tu.tanh, [draw(4, 5)]),
        "concat": (lambda a, b: tu.concat([a, b], axis=1), [draw(3, 2), draw(3, 4)]),
        "reshape": (lambda x: tu.reshape(x, (4, 6)), [draw(2, 3, 4)]),
        "transpose": (lambda x: tu.transpose(x, (2, 0, 1)), [draw(2, 3, 4)]),
        "mean": (lambda x: tu.mean(x, axis=1), [draw(3, 5)]),
        "log": (tu.log, [Tensor(rng.uniform(0.5, 2.0, size=(4, 3)))]),
        "clip": (lambda x: tu.clip(x, -0.5, 0.5), [Tensor(_away_from(rng.normal(size=(4, 5)), (-0.5, 0.5)))]),
        "loss_d": (lambda x: loss_d(target, tu.sigmoid(x)), [draw(6)]),
        "loss_c": (lambda x: loss_c(labels, tu.sigmoid(x)), [draw(4, 3)]),
    }


def _scalarized(forward: Forward, inputs: list[Tensor], rng: np.random.Generator) -> Forward:
    """Reduce a primitive's output to a scalar through fixed random weights"""
    shape = forward(*[tensor.detach() for tensor in inputs]).shape
    if shape == ():
        return forward
    weights = Tensor(rng.normal(size=shape))
    return lambda *args: tu.mean(tu.mul(forward(*args), weights))


def gradcheck_suite(seed: int, trials: int = 20) -> list[GradientCheck]:
    """Check every primitive and both losses on ``trials`` random draws; one row per name (worst trial)"""
    if trials <= 0:
        raise ValueError(f"trials must be positive, got {trials}")
    rng = np.random.default_rng(seed)
    worst: dict[str, GradientCheck] = {}
    with tu.precision("float64"):
        for trial in range(trials):
            for name, (forward, inputs) in _cases(rng, trial).items():
                result = check_gradient(name, _scalarized(forward, inputs, rng), inputs)
                previous = worst.get(name)
                if previous is not None:
                    result = GradientCheck(
                        name=name,
                        max_abs_error=max(result.max_abs_error, previous.max_abs_error),
                        max_rel_error=max(result.max_rel_error, previous.max_rel_error),
                        passed=result.passed and previous.passed,
                    )
                worst[name] = result
    failed = [name for name, row in worst.items() if not row.passed]
    if failed:
        logger.warning(f"Gradient check failed for {failed}")
    else:
        logger.info(f"Gradient check passed for {len(worst)} operations over {trials} trials")
    return list(worst.values())
