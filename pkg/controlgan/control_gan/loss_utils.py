import logging
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from control_gan.model_utils import ParamSet
from control_gan.tensor_utils import Array, ShapeError, Tensor, as_tensor, clip, log, mean, mul, scale

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class MissingGradientError(ValueError):
    """Raised when an optimizer step is asked for but a parameter has no gradient"""

    pass


class FrozenParametersError(RuntimeError):
    """Raised when an optimizer step targets a frozen parameter set"""

    pass


def _binary_cross_entropy(targets: Tensor, probs: Tensor) -> Tensor:
    p = clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    log_likelihood = mul(targets, log(p)) + mul(1.0 - targets, log(1.0 - p))
    return scale(mean(log_likelihood), -1.0)


def _check_probabilities(name: str, values: Array) -> None:
    # NaN passes through so the caller's divergence check can attribute it
    if np.any((values < 0.0) | (values > 1.0)):
        raise ValueError(f"{name} must lie in [0, 1]; got range [{np.nanmin(values):.6g}, {np.nanmax(values):.6g}]")


def loss_d(target: float, score: Tensor) -> Tensor:
    """Mean binary cross-entropy of realness scores against a constant target"""
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target must lie in [0, 1], got {target}")
    if score.ndim != 1 or score.shape[0] == 0:
        raise ShapeError(f"loss_d needs a non-empty score vector, got shape {score.shape}")
    _check_probabilities("realness scores", score.values)
    return _binary_cross_entropy(Tensor(target, dtype=score.values.dtype), score)


def loss_c(labels: Tensor | npt.ArrayLike, probs: Tensor) -> Tensor:
    """Mean per-label binary cross-entropy; labels are 0/1"""
    labels = as_tensor(labels)
    if probs.ndim != 2 or labels.shape != probs.shape:
        raise ShapeError(f"loss_c needs matching (batch, labels) shapes, got {labels.shape} and {probs.shape}")
    if not np.isin(labels.values, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    _check_probabilities("class probabilities", probs.values)
    return _binary_cross_entropy(labels, probs)


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, Array] = field(default_factory=dict)
    second_moment: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 2e-4) -> "AdamState":
        return cls(
            lr=lr,
            first_moment={name: np.zeros_like(tensor.values) for name, tensor in params.items()},
            second_moment={name: np.zeros_like(tensor.values) for name, tensor in params.items()},
        )


def adam_apply(
    state: AdamState, params: ParamSet, grads: dict[str, Array] | None = None
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam step, applied in place to ``params`` and ``state``.

    Gradients default to the ``grad`` field of every parameter tensor.
    """
    if params.frozen:
        raise FrozenParametersError(f"{params.spec.role} parameters are frozen and cannot be updated")
    if list(state.first_moment) != list(params) or any(
        state.first_moment[name].shape != tensor.shape or state.second_moment[name].shape != tensor.shape
        for name, tensor in params.items()
    ):
        raise ValueError(f"Optimizer state does not mirror the {params.spec.role} parameters")
    if grads is None:
        grads = {name: tensor.grad for name, tensor in params.items() if tensor.grad is not None}
    missing = [name for name in params if name not in grads]
    if missing:
        role = params.spec.role
        raise MissingGradientError(f"No gradient for {len(missing)} {role} parameter(s), first {missing[0]}")
    mismatched = [name for name, tensor in params.items() if np.shape(grads[name]) != tensor.shape]
    if mismatched:
        name = mismatched[0]
        raise ShapeError(f"Gradient {np.shape(grads[name])} does not mirror parameter {name} {params[name].shape}")

    state.step_count += 1
    correction1 = 1.0 - state.beta1**state.step_count
    correction2 = 1.0 - state.beta2**state.step_count
    for name, tensor in params.items():
        grad = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        tensor.values -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps_hat)
    return params, state
