"""
Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation is a registered primitive with a shape rule, a
forward and a backward. Operations executed inside ``with Tape():`` are recorded
in creation order; ``backward`` walks that record once, in reverse, and
accumulates gradients into the leaf tensors marked ``requires_grad``.
Operations executed outside any tape are evaluated eagerly and recorded nowhere.
"""

import contextlib
import logging
from collections.abc import Callable, Iterator, Sequence
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np
import numpy.typing as npt
from scipy.special import expit

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.floating]
Attrs = dict[str, Any]

DTYPES: dict[str, type[np.floating]] = {"float64": np.float64, "float32": np.float32}

_dtype: ContextVar[type[np.floating]] = ContextVar("dtype", default=np.float64)
_active_tape: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


class ShapeError(ValueError):
    """Raised when inputs do not conform to a primitive's shape rule"""

    pass


class UnknownPrimitiveError(LookupError):
    """Raised when a primitive id has no registered implementation"""

    pass


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Set the dtype used for newly created tensors ("float64" or "float32")"""
    if name not in DTYPES:
        raise ValueError(f"Unknown precision {name!r}. Supported precisions are {list(DTYPES)}")
    token = _dtype.set(DTYPES[name])
    try:
        yield
    finally:
        _dtype.reset(token)


def default_dtype() -> type[np.floating]:
    return _dtype.get()


class Tensor:
    """Dense real array that can take part in a differentiation tape."""

    __slots__ = ("grad", "requires_grad", "tape_id", "values")

    def __init__(self, values: npt.ArrayLike, requires_grad: bool = False, dtype: npt.DTypeLike | None = None) -> None:
        self.values: Array = np.asarray(values, dtype=dtype if dtype is not None else default_dtype())
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Return a constant tensor sharing this tensor's values"""
        return Tensor(self.values, requires_grad=False, dtype=self.values.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: float) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: float) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(value: "Tensor | npt.ArrayLike") -> Tensor:
    """Wrap plain numbers and arrays as constant tensors"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class Node:
    """One recorded primitive application"""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: Attrs
    context: Any = None


@dataclass
class Tape:
    """Ordered record of primitive applications for one training step."""

    nodes: list[Node] = field(default_factory=list)
    _tokens: list[Any] = field(default_factory=list, repr=False)

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc: object) -> None:
        _active_tape.reset(self._tokens.pop())

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def owns(self, tensor: Tensor) -> bool:
        index = tensor.tape_id
        return index is not None and index < len(self.nodes) and self.nodes[index].output is tensor

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every trainable leaf reached"""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.owns(loss):
            raise ValueError("Loss was not recorded on this tape; compute it inside the tape's context.")

        grads: dict[int, Array] = {id(loss): np.ones_like(loss.values)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss.tape_id + 1]):  # pyright: ignore[reportOperatorIssue]
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            primitive = PRIMITIVES[node.kind]
            input_values = [tensor.values for tensor in node.inputs]
            input_grads = primitive.backward(upstream, input_values, node.output.values, node.context, node.attrs)
            for tensor, grad in zip(node.inputs, input_grads, strict=True):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad
                if tensor.tape_id is None:
                    leaves[key] = tensor

        for key, leaf in leaves.items():
            grad = np.array(grads[key], dtype=leaf.values.dtype)
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad


def active_tape() -> Tape | None:
    return _active_tape.get()


def backward(loss: Tensor) -> None:
    """Run the backward pass of the active tape from ``loss``"""
    tape = _active_tape.get()
    if tape is None:
        raise ValueError("backward() called with no active tape.")
    tape.backward(loss)


# Primitive registry


class Primitive:
    """Shape rule, forward and backward of one differentiable operation."""

    kind: ClassVar[str]
    min_inputs: ClassVar[int] = 1
    max_inputs: ClassVar[int | None] = 1

    def check(self, shapes: list[tuple[int, ...]], attrs: Attrs) -> None:
        pass

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        raise NotImplementedError

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        raise NotImplementedError


PRIMITIVES: dict[str, Primitive] = {}


def register(cls: type[Primitive]) -> type[Primitive]:
    PRIMITIVES[cls.kind] = cls()
    return cls


def apply_primitive(kind: str, inputs: Sequence["Tensor | npt.ArrayLike"], attrs: Attrs | None = None) -> Tensor:
    """Evaluate a registered primitive, recording it on the active tape when any input is trainable"""
    primitive = PRIMITIVES.get(kind)
    if primitive is None:
        raise UnknownPrimitiveError(f"Primitive {kind!r} is not registered; known: {sorted(PRIMITIVES)}")
    attrs = attrs or {}
    tensors = tuple(as_tensor(value) for value in inputs)
    arity = len(tensors)
    if arity < primitive.min_inputs or (primitive.max_inputs is not None and arity > primitive.max_inputs):
        raise ShapeError(f"{kind} takes {primitive.min_inputs}..{primitive.max_inputs} inputs, got {len(tensors)}")
    primitive.check([tensor.shape for tensor in tensors], attrs)

    values, context = primitive.forward([tensor.values for tensor in tensors], attrs)
    tape = _active_tape.get()
    tracked = tape is not None and any(tensor.requires_grad for tensor in tensors)
    output = Tensor(values, requires_grad=tracked, dtype=values.dtype)
    if tracked:
        assert tape is not None
        output.tape_id = tape.record(Node(kind, tensors, output, attrs, context))
    return output


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class _Elementwise(Primitive):
    min_inputs = 2
    max_inputs = 2

    def check(self, shapes: list[tuple[int, ...]], attrs: Attrs) -> None:
        try:
            np.broadcast_shapes(*shapes)
        except ValueError as e:
            raise ShapeError(f"{self.kind}: shapes {shapes[0]} and {shapes[1]} do not broadcast") from e


@register
class Add(_Elementwise):
    kind = "add"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return xs[0] + xs[1], None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


@register
class Sub(_Elementwise):
    kind = "sub"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return xs[0] - xs[1], None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


@register
class Mul(_Elementwise):
    kind = "mul"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return xs[0] * xs[1], None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]


@register
class Scale(Primitive):
    kind = "scale"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return xs[0] * attrs["factor"], None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [g * attrs["factor"]]


@register
class MatMul(Primitive):
    """(n, k) @ (k, m) -> (n, m)"""

    kind = "matmul"
    min_inputs = 2
    max_inputs = 2

    def check(self, shapes: list[tuple[int, ...]], attrs: Attrs) -> None:
        a, b = shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeError(f"matmul needs (n, k) @ (k, m), got {a} @ {b}")

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return xs[0] @ xs[1], None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [g @ xs[1].T, xs[0].T @ g]


# Convolution helpers (NCHW layout, zero padding)


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _conv_padding(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return _same_padding(size, kernel, stride)
    if padding == "valid":
        return 0, 0
    raise ValueError(f"Unknown padding mode {padding!r}; expected 'same' or 'valid'")


def _im2col(x: Array, kernel_h: int, kernel_w: int, stride: int, out_h: int, out_w: int) -> Array:
    """(n, c, h, w) -> (n, c*kh*kw, out_h*out_w)"""
    x = np.ascontiguousarray(x)
    n, c = x.shape[:2]
    sn, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kernel_h, kernel_w, out_h, out_w),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(n, c * kernel_h * kernel_w, out_h * out_w)


def _col2im(
    cols: Array, shape: tuple[int, ...], kernel_h: int, kernel_w: int, stride: int, out_h: int, out_w: int
) -> Array:
    """Scatter-add columns back onto an (n, c, h, w) image; adjoint of _im2col"""
    n, c = shape[:2]
    image = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kernel_h, kernel_w, out_h, out_w)
    for i in range(kernel_h):
        for j in range(kernel_w):
            image[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[:, :, i, j]
    return image


@register
class Conv2d(Primitive):
    """x (n, c, h, w), weight (o, c, kh, kw), optional bias (o,) -> (n, o, h', w')

    "same" gives h' = ceil(h / stride); "valid" gives h' = (h - kh) // stride + 1.
    """

    kind = "conv2d"
    min_inputs = 2
    max_inputs = 3

    def check(self, shapes: list[tuple[int, ...]], attrs: Attrs) -> None:
        x, w = shapes[0], shapes[1]
        if len(x) != 4 or len(w) != 4:
            raise ShapeError(f"conv2d needs a 4-D input and 4-D weight, got {x} and {w}")
        if w[1] != x[1]:
            raise ShapeError(f"conv2d weight expects {w[1]} input channels, input has {x[1]} (shapes {x}, {w})")
        if len(shapes) == 3 and shapes[2] != (w[0],):
            raise ShapeError(f"conv2d bias must have shape ({w[0]},), got {shapes[2]}")
        if attrs.get("padding", "same") == "valid" and (x[2] < w[2] or x[3] < w[3]):
            raise ShapeError(f"conv2d 'valid' kernel {w[2:]} is larger than input {x[2:]}")

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        x, w = xs[0], xs[1]
        stride, padding = attrs.get("stride", 1), attrs.get("padding", "same")
        n, _, h, width = x.shape
        out_c, _, kh, kw = w.shape
        pad_h = _conv_padding(h, kh, stride, padding)
        pad_w = _conv_padding(width, kw, stride, padding)
        padded = np.pad(x, ((0, 0), (0, 0), pad_h, pad_w))
        out_h = (padded.shape[2] - kh) // stride + 1
        out_w = (padded.shape[3] - kw) // stride + 1
        cols = _im2col(padded, kh, kw, stride, out_h, out_w)
        out = np.matmul(w.reshape(out_c, -1), cols)
        if len(xs) == 3:
            out = out + xs[2][None, :, None]
        return out.reshape(n, out_c, out_h, out_w), (cols, padded.shape, pad_h, pad_w)

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        x, w = xs[0], xs[1]
        cols, padded_shape, pad_h, pad_w = context
        stride = attrs.get("stride", 1)
        n, out_c, out_h, out_w = g.shape
        kh, kw = w.shape[2:]
        g2 = g.reshape(n, out_c, out_h * out_w)
        grad_w = np.einsum("nol,nkl->ok", g2, cols).reshape(w.shape)
        grad_cols = np.matmul(w.reshape(out_c, -1).T, g2)
        grad_padded = _col2im(grad_cols, padded_shape, kh, kw, stride, out_h, out_w)
        grad_x = grad_padded[:, :, pad_h[0] : pad_h[0] + x.shape[2], pad_w[0] : pad_w[0] + x.shape[3]]
        grads: list[Array | None] = [grad_x, grad_w]
        if len(xs) == 3:
            grads.append(g2.sum(axis=(0, 2)))
        return grads


@register
class ConvTranspose2d(Primitive):
    """x (n, c_in, h, w), weight (c_in, c_out, kh, kw), optional bias (c_out,) -> (n, c_out, h', w')

    "same" gives h' = h * stride (the adjoint of a "same" conv2d); "valid" gives
    h' = (h - 1) * stride + kh.
    """

    kind = "conv_transpose2d"
    min_inputs = 2
    max_inputs = 3

    def check(self, shapes: list[tuple[int, ...]], attrs: Attrs) -> None:
        x, w = shapes[0], shapes[1]
        if len(x) != 4 or len(w) != 4:
            raise ShapeError(f"conv_transpose2d needs a 4-D input and 4-D weight, got {x} and {w}")
        if w[0] != x[1]:
            raise ShapeError(f"conv_transpose2d weight expects {w[0]} input channels, input has {x[1]}")
        if len(shapes) == 3 and shapes[2] != (w[1],):
            raise ShapeError(f"conv_transpose2d bias must have shape ({w[1]},), got {shapes[2]}")
        stride = attrs.get("stride", 1)
        if attrs.get("padding", "same") == "same" and (w[2] < stride or w[3] < stride):
            raise ShapeError(f"conv_transpose2d 'same' needs kernel {w[2:]} >= stride {stride}")

    @staticmethod
    def _crop(full: int, size: int, stride: int, padding: str) -> tuple[int, int]:
        if padding == "same":
            target = size * stride
            return (full - target) // 2, target
        if padding == "valid":
            return 0, full
        raise ValueError(f"Unknown padding mode {padding!r}; expected 'same' or 'valid'")

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        x, w = xs[0], xs[1]
        stride, padding = attrs.get("stride", 1), attrs.get("padding", "same")
        n, in_c, h, width = x.shape
        out_c, kh, kw = w.shape[1:]
        full_h, full_w = (h - 1) * stride + kh, (width - 1) * stride + kw
        cols = np.matmul(w.reshape(in_c, -1).T, x.reshape(n, in_c, h * width))
        full = _col2im(cols, (n, out_c, full_h, full_w), kh, kw, stride, h, width)
        top, out_h = self._crop(full_h, h, stride, padding)
        left, out_w = self._crop(full_w, width, stride, padding)
        out = full[:, :, top : top + out_h, left : left + out_w]
        if len(xs) == 3:
            out = out + xs[2][None, :, None, None]
        return np.ascontiguousarray(out), (full.shape, top, left)

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        x, w = xs[0], xs[1]
        full_shape, top, left = context
        stride = attrs.get("stride", 1)
        n, in_c, h, width = x.shape
        kh, kw = w.shape[2:]
        grad_full = np.zeros(full_shape, dtype=g.dtype)
        grad_full[:, :, top : top + g.shape[2], left : left + g.shape[3]] = g
        grad_cols = _im2col(grad_full, kh, kw, stride, h, width)
        grad_x = np.matmul(w.reshape(in_c, -1), grad_cols).reshape(x.shape)
        grad_w = np.einsum("nil,nkl->ik", x.reshape(n, in_c, h * width), grad_cols).reshape(w.shape)
        grads: list[Array | None] = [grad_x, grad_w]
        if len(xs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads


@register
class AvgPool2d(Primitive):
    kind = "avg_pool2d"

    def check(self, shapes: list[tuple[int, ...]], attrs: Attrs) -> None:
        x, size = shapes[0], attrs.get("size", 2)
        if len(x) != 4 or x[2] % size or x[3] % size:
            raise ShapeError(f"avg_pool2d({size}) needs a 4-D input with spatial extents divisible by {size}, got {x}")

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        x, size = xs[0], attrs.get("size", 2)
        n, c, h, w = x.shape
        return x.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5)), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        size = attrs.get("size", 2)
        return [np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)]


@register
class LeakyRelu(Primitive):
    kind = "leaky_relu"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        x = xs[0]
        return np.where(x > 0, x, x * attrs.get("slope", 0.1)), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [np.where(xs[0] > 0, g, g * attrs.get("slope", 0.1))]


@register
class Sigmoid(Primitive):
    kind = "sigmoid"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return expit(xs[0]), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [g * out * (1.0 - out)]


@register
class Tanh(Primitive):
    kind = "tanh"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return np.tanh(xs[0]), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [g * (1.0 - out * out)]


@register
class Concat(Primitive):
    kind = "concat"
    max_inputs = None

    def check(self, shapes: list[tuple[int, ...]], attrs: Attrs) -> None:
        first = shapes[0]
        axis = attrs.get("axis", -1) % max(len(first), 1)
        for shape in shapes[1:]:
            if len(shape) != len(first) or any(a != b for i, (a, b) in enumerate(zip(shape, first)) if i != axis):
                raise ShapeError(f"concat along axis {axis}: shapes {shapes} disagree off the concatenation axis")

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return np.concatenate(xs, axis=attrs.get("axis", -1)), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        axis = attrs.get("axis", -1)
        offsets = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return list(np.split(g, offsets, axis=axis))


@register
class Reshape(Primitive):
    kind = "reshape"

    def check(self, shapes: list[tuple[int, ...]], attrs: Attrs) -> None:
        try:
            np.empty(shapes[0], dtype=np.bool_).reshape(attrs["shape"])
        except ValueError as e:
            raise ShapeError(f"cannot reshape {shapes[0]} into {tuple(attrs['shape'])}") from e

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return xs[0].reshape(attrs["shape"]), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [g.reshape(xs[0].shape)]


@register
class Transpose(Primitive):
    kind = "transpose"

    def check(self, shapes: list[tuple[int, ...]], attrs: Attrs) -> None:
        if sorted(attrs["axes"]) != list(range(len(shapes[0]))):
            raise ShapeError(f"transpose axes {attrs['axes']} are not a permutation for shape {shapes[0]}")

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return np.ascontiguousarray(np.transpose(xs[0], attrs["axes"])), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [np.transpose(g, np.argsort(attrs["axes"]))]


@register
class Mean(Primitive):
    kind = "mean"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return np.asarray(xs[0].mean(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        x, axis = xs[0], attrs.get("axis")
        if axis is None:
            return [np.broadcast_to(g, x.shape) / x.size]
        axes = tuple(a % x.ndim for a in np.atleast_1d(axis))
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, axes)
        count = int(np.prod([x.shape[a] for a in axes]))
        return [np.broadcast_to(g, x.shape) / count]


@register
class Log(Primitive):
    kind = "log"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return np.log(xs[0]), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        return [g / xs[0]]


@register
class Clip(Primitive):
    """Clamp to [low, high]; the gradient is zero where the clamp is active"""

    kind = "clip"

    def forward(self, xs: list[Array], attrs: Attrs) -> tuple[Array, Any]:
        return np.clip(xs[0], attrs["low"], attrs["high"]), None

    def backward(self, g: Array, xs: list[Array], out: Array, context: Any, attrs: Attrs) -> list[Array | None]:
        x = xs[0]
        return [np.where((x >= attrs["low"]) & (x <= attrs["high"]), g, 0.0)]


# Functional surface


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor | npt.ArrayLike, b: Tensor | npt.ArrayLike) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", [x], {"factor": factor})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    inputs = [x, weight] if bias is None else [x, weight, bias]
    return apply_primitive("conv2d", inputs, {"stride": stride, "padding": padding})


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same"
) -> Tensor:
    inputs = [x, weight] if bias is None else [x, weight, bias]
    return apply_primitive("conv_transpose2d", inputs, {"stride": stride, "padding": padding})


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    return apply_primitive("avg_pool2d", [x], {"size": size})


def leaky_relu(x: Tensor | npt.ArrayLike, slope: float = 0.1) -> Tensor:
    return apply_primitive("leaky_relu", [x], {"slope": slope})


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", [x])


def concat(xs: Sequence[Tensor | npt.ArrayLike], axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(xs), {"axis": axis})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return apply_primitive("transpose", [x], {"axes": tuple(axes)})


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [x], {"axis": axis, "keepdims": keepdims})


def log(x: Tensor) -> Tensor:
    return apply_primitive("log", [x])


def clip(x: Tensor, low: float, high: float) -> Tensor:
    return apply_primitive("clip", [x], {"low": low, "high": high})


# Finite differences


def _scalar(value: "Tensor | float") -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def finite_difference_gradient(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-6) -> Array:
    """Central-difference estimate of df/dx, one coordinate at a time"""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.values, dtype=np.float64)
    grad = np.zeros_like(base)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus.flat[i] += eps
        minus.flat[i] -= eps
        high = _scalar(f(Tensor(plus, dtype=x.values.dtype)))
        low = _scalar(f(Tensor(minus, dtype=x.values.dtype)))
        grad.flat[i] = (high - low) / (2.0 * eps)
    return grad


@dataclass(frozen=True)
class GradientCheck:
    name: str
    max_abs_error: float
    max_rel_error: float
    passed: bool


def check_gradient(
    name: str,
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> GradientCheck:
    """Compare backward() against central differences for every input of ``f``.

    An element passes when its absolute error is within ``atol`` or its relative
    error (against the larger magnitude of the two estimates) is within ``rtol``.
    """
    tensors = [Tensor(t.values, requires_grad=True, dtype=t.values.dtype) for t in inputs]
    with Tape() as tape:
        loss = f(*tensors)
    tape.backward(loss)

    max_abs, max_rel = 0.0, 0.0
    for index, tensor in enumerate(tensors):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.values)

        def partial(x: Tensor, index: int = index) -> Tensor:
            args = [t.detach() for t in tensors]
            args[index] = x
            return f(*args)

        numeric = finite_difference_gradient(partial, tensor, eps)
        diff = np.abs(analytic - numeric)
        magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.where(diff > atol, diff / np.maximum(magnitude, np.finfo(np.float64).tiny), 0.0)
        max_abs = max(max_abs, float(diff.max(initial=0.0)))
        max_rel = max(max_rel, float(rel.max(initial=0.0)))

    passed = max_rel <= rtol
    logger.debug(f"Gradient check {name}: max abs {max_abs:.3e}, max rel {max_rel:.3e}, passed={passed}")
    return GradientCheck(name=name, max_abs_error=max_abs, max_rel_error=max_rel, passed=passed)
