"""
Tensor Autodiff Module

This module provides a small define-by-run reverse-mode automatic
differentiation engine over dense float64 numpy arrays, and the Adam
optimizer that trains both networks of the solver.

Every differentiable expression used by the solver (kernel Monte Carlo loss,
reconstruction loss, hyper-Laplacian prior, network forward passes) is built
from the ops registered here. The graph is rebuilt on every forward pass and
walked once, in reverse topological order, by `backward`.

Registered ops:
    add, subtract, multiply, scalar_multiply, matmul, conv2d,
    upsample_nearest, concat, leaky_relu, sigmoid, softmax, sum, mean,
    power, sq_frobenius, reshape
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, softmax

logger = logging.getLogger(__name__)

# Finite-difference step and pass threshold for gradient checks
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-6

PADDING_MODES = ("zero", "reflect", "valid")


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step meets a NaN or infinite gradient."""

    def __init__(self, parameter_name: str):
        self.parameter_name = parameter_name
        super().__init__(
            f"Non-finite gradient for parameter '{parameter_name}'; Adam step aborted"
        )


# =============================================================================
# Tensor and graph nodes
# =============================================================================

class Tensor:
    """
    A dense float64 array that can take part in a differentiable graph.

    Leaf tensors created with `requires_grad=True` are the trainable
    parameters; tensors produced by `forward_op` keep a reference to the op
    that produced them so `backward` can walk the graph.

    Args:
        data: Anything numpy can turn into a float array. Scalars become shape [1].
        requires_grad: Whether gradients should flow to this tensor.
        name: Optional label used in error messages and parameter manifests.
    """

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional["Function"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Return a graph-free tensor sharing no state with this one."""
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f"'{self.name}', " if self.name else ""
        return f"Tensor({label}shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other: Any) -> "Tensor":
        return forward_op("add", [self, as_tensor(other)])

    def __sub__(self, other: Any) -> "Tensor":
        return forward_op("subtract", [self, as_tensor(other)])

    def __mul__(self, other: Any) -> "Tensor":
        if np.isscalar(other):
            return forward_op("scalar_multiply", [self], scalar=float(other))
        return forward_op("multiply", [self, as_tensor(other)])

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return forward_op("matmul", [self, other])

    def reshape(self, *shape: int) -> "Tensor":
        return forward_op("reshape", [self], shape=tuple(shape))

    def sum(self) -> "Tensor":
        return forward_op("sum", [self])

    def mean(self) -> "Tensor":
        return forward_op("mean", [self])


def as_tensor(value: Any) -> Tensor:
    """Wrap a constant as a non-trainable tensor (tensors pass through)."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


class Function:
    """
    Base class for a differentiable op.

    Subclasses implement `forward` on raw arrays (validating shapes and
    stashing whatever the backward pass needs) and `backward`, which maps
    the gradient of the output to one gradient per input.
    """

    name = ""

    def __init__(self, **attrs: Any):
        self.attrs = attrs
        self.inputs: Tuple[Tensor, ...] = ()

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"Forward pass not implemented for op '{self.name}'")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"Backward pass not implemented for op '{self.name}'")


_OPS: Dict[str, type] = {}


def register_op(name: str) -> Callable[[type], type]:
    """Class decorator adding an op to the registry under `name`."""

    def decorator(cls: type) -> type:
        cls.name = name
        _OPS[name] = cls
        return cls

    return decorator


def registered_ops() -> List[str]:
    """Names of every registered op, in registration order."""
    return list(_OPS)


def forward_op(name: str, inputs: Sequence[Any], **attrs: Any) -> Tensor:
    """
    Apply a registered op and record the graph edge for backward.

    Args:
        name: Registered op identifier (see `registered_ops()`).
        inputs: Input tensors (constants are wrapped as non-trainable tensors).
        **attrs: Op attributes, e.g. `stride`, `padding`, `exponent`.

    Returns:
        Tensor: The op output. It requires grad if any input does.

    Raises:
        ValueError: Unknown op, or input shapes that do not fit the op.
    """
    if name not in _OPS:
        raise ValueError(f"Unknown op '{name}'. Registered ops: {', '.join(_OPS)}")

    tensors = [as_tensor(t) for t in inputs]
    fn = _OPS[name](**attrs)
    out_data = fn.forward(*(t.data for t in tensors))

    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in tensors))
    if out.requires_grad:
        fn.inputs = tuple(tensors)
        out._node = fn
    return out


# =============================================================================
# Elementwise and linear-algebra ops
# =============================================================================

def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shape mismatch between {list(a.shape)} and {list(b.shape)}"
        ) from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes that broadcasting expanded so grad matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@register_op("add")
class Add(Function):
    def forward(self, a, b):
        _broadcast_shape("add", a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


@register_op("subtract")
class Subtract(Function):
    def forward(self, a, b):
        _broadcast_shape("subtract", a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


@register_op("multiply")
class Multiply(Function):
    def forward(self, a, b):
        _broadcast_shape("multiply", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


@register_op("scalar_multiply")
class ScalarMultiply(Function):
    def forward(self, a):
        self.scalar = float(self.attrs["scalar"])
        return a * self.scalar

    def backward(self, grad):
        return (grad * self.scalar,)


@register_op("matmul")
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(
                f"matmul: shape mismatch between {list(a.shape)} and {list(b.shape)}"
            )
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


@register_op("leaky_relu")
class LeakyReLU(Function):
    def forward(self, x):
        self.slope = float(self.attrs.get("slope", 0.1))
        self.positive = x > 0
        return np.where(self.positive, x, self.slope * x)

    def backward(self, grad):
        return (np.where(self.positive, grad, self.slope * grad),)


@register_op("sigmoid")
class Sigmoid(Function):
    def forward(self, x):
        self.out = expit(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


@register_op("softmax")
class Softmax(Function):
    """Softmax over all entries of the tensor, as if it were flattened."""

    def forward(self, x):
        self.out = softmax(x, axis=None)
        return self.out

    def backward(self, grad):
        return (self.out * (grad - np.sum(grad * self.out)),)


@register_op("sum")
class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.array([x.sum()])

    def backward(self, grad):
        return (np.full(self.shape, grad[0]),)


@register_op("mean")
class Mean(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.array([x.mean()])

    def backward(self, grad):
        return (np.full(self.shape, grad[0] / np.prod(self.shape)),)


@register_op("power")
class Power(Function):
    """
    Elementwise x**exponent for a real exponent.

    The derivative at a zero base is taken as 0 when the exponent is below 1
    (the one-sided derivative is unbounded there).
    """

    def forward(self, x):
        self.exponent = float(self.attrs["exponent"])
        if not float(self.exponent).is_integer() and np.any(x < 0):
            raise ValueError(
                f"power: negative base with fractional exponent {self.exponent} "
                f"(min base {x.min():.6g}, shape {list(x.shape)})"
            )
        self.x = x
        return np.power(x, self.exponent)

    def backward(self, grad):
        p = self.exponent
        if p < 1:
            safe = np.where(self.x == 0, 1.0, self.x)
            local = np.where(self.x == 0, 0.0, p * np.power(safe, p - 1))
        else:
            local = p * np.power(self.x, p - 1)
        return (grad * local,)


@register_op("sq_frobenius")
class SquaredFrobenius(Function):
    def forward(self, x):
        self.x = x
        return np.array([np.sum(x * x)])

    def backward(self, grad):
        return (2.0 * grad[0] * self.x,)


@register_op("reshape")
class Reshape(Function):
    def forward(self, x):
        shape = tuple(int(s) for s in self.attrs["shape"])
        if int(np.prod(shape)) != x.size:
            raise ValueError(f"reshape: cannot view shape {list(x.shape)} as {list(shape)}")
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


# =============================================================================
# Image ops: convolution, upsampling, channel concatenation
# =============================================================================

def _pad_widths(kh: int, kw: int) -> Tuple[Tuple[int, int], ...]:
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return ((0, 0), (0, 0), (top, kh - 1 - top), (left, kw - 1 - left))


def pad_array(x: np.ndarray, kh: int, kw: int, mode: str) -> np.ndarray:
    """Pad the two spatial axes of an [N, C, H, W] array for a kh×kw window."""
    if mode == "valid":
        return x
    widths = _pad_widths(kh, kw)
    if mode == "reflect":
        return np.pad(x, widths, mode="reflect")
    return np.pad(x, widths, mode="constant")


def _unpad_adjoint(grad: np.ndarray, in_shape: Tuple[int, ...], kh: int, kw: int, mode: str) -> np.ndarray:
    """Transpose of `pad_array`: fold padded-grid gradients back onto the input."""
    if mode == "valid":
        return grad
    n, c, h, w = in_shape
    widths = _pad_widths(kh, kw)
    if mode == "zero":
        (t, _), (l, _) = widths[2], widths[3]
        return grad[:, :, t:t + h, l:l + w]

    # Reflect padding copies input pixels; route each padded cell back to its source.
    index = np.pad(np.arange(h * w).reshape(h, w), widths[2:], mode="reflect").ravel()
    folded = np.zeros((h * w, n * c))
    np.add.at(folded, index, grad.reshape(n * c, -1).T)
    return folded.T.reshape(n, c, h, w)


@register_op("conv2d")
class Conv2d(Function):
    """
    2-D cross-correlation of an [N, C, H, W] input with [O, C, kh, kw] weights.

    Attributes:
        stride: Sampling step of the output grid (default 1).
        padding: "zero", "reflect" (both keep H×W at stride 1) or "valid".

    An optional third input is a bias of shape [O].
    """

    def forward(self, x, w, b=None):
        self.stride = int(self.attrs.get("stride", 1))
        self.padding = self.attrs.get("padding", "zero")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"conv2d: unknown padding '{self.padding}', expected one of {PADDING_MODES}")
        if self.stride < 1:
            raise ValueError(f"conv2d: stride must be >= 1, got {self.stride}")
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ValueError(
                f"conv2d: shape mismatch between input {list(x.shape)} and weight {list(w.shape)}"
            )
        if b is not None and b.shape != (w.shape[0],):
            raise ValueError(f"conv2d: bias shape {list(b.shape)} does not match weight {list(w.shape)}")

        kh, kw = w.shape[2], w.shape[3]
        xp = pad_array(x, kh, kw, self.padding)
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise ValueError(
                f"conv2d: input {list(x.shape)} is smaller than kernel {list(w.shape)} with '{self.padding}' padding"
            )

        # [N, C, Ho, Wo, kh, kw] view of every output window
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::self.stride, ::self.stride]
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b[None, :, None, None]

        self.x_shape, self.xp_shape = x.shape, xp.shape
        self.windows, self.w, self.has_bias = windows, w, b is not None
        return out

    def backward(self, grad):
        kh, kw = self.w.shape[2], self.w.shape[3]
        s = self.stride
        ho, wo = grad.shape[2], grad.shape[3]

        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))

        # [N, Ho, Wo, C, kh, kw] contributions scattered back over the padded grid
        cols = np.tensordot(grad, self.w, axes=([1], [0]))
        grad_xp = np.zeros(self.xp_shape)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += (
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        grad_x = _unpad_adjoint(grad_xp, self.x_shape, kh, kw, self.padding)

        if self.has_bias:
            return grad_x, grad_w, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w


@register_op("upsample_nearest")
class UpsampleNearest(Function):
    def forward(self, x):
        self.factor = int(self.attrs.get("factor", 2))
        if x.ndim != 4:
            raise ValueError(f"upsample_nearest: expected [N, C, H, W], got {list(x.shape)}")
        self.in_shape = x.shape
        return x.repeat(self.factor, axis=2).repeat(self.factor, axis=3)

    def backward(self, grad):
        n, c, h, w = self.in_shape
        f = self.factor
        return (grad.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)


@register_op("concat")
class Concat(Function):
    """Concatenate [N, C_i, H, W] inputs along the channel axis."""

    def forward(self, *xs):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ValueError(
                    f"concat: shape mismatch between {list(ref)} and {list(x.shape)}"
                )
        self.splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=1))


# =============================================================================
# Backward pass
# =============================================================================

def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order of the graph below `root` (inputs before outputs), iteratively."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for parent in tensor._node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> Dict[Tensor, np.ndarray]:
    """
    Reverse-mode sweep from `loss` to every trainable leaf below it.

    Each call computes fresh gradients: leaf `.grad` is overwritten, never
    accumulated across calls.

    Args:
        loss: Scalar tensor of shape [1]. A non-scalar output is accepted only
            together with an explicit upstream `grad` of the same shape.
        grad: Optional upstream gradient (vector-Jacobian product seed).

    Returns:
        Dict mapping each trainable leaf tensor to d(loss)/d(leaf).

    Raises:
        ValueError: Non-scalar loss without `grad`, or a `grad` of the wrong shape.
    """
    if grad is None:
        if loss.shape != (1,):
            raise ValueError(
                f"backward() needs a scalar loss of shape [1], got shape {list(loss.shape)}"
            )
        seed = np.ones(1)
    else:
        seed = np.asarray(grad, dtype=np.float64)
        if seed.shape != loss.shape:
            raise ValueError(
                f"backward(): upstream grad shape {list(seed.shape)} does not match output {list(loss.shape)}"
            )

    leaves: Dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves

    pending: Dict[int, np.ndarray] = {id(loss): seed}
    for tensor in reversed(_topological_order(loss)):
        g = pending.pop(id(tensor), None)
        if g is None:
            continue
        if tensor._node is None:
            leaves[tensor] = g
            continue
        for parent, parent_grad in zip(tensor._node.inputs, tensor._node.backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    for leaf, g in leaves.items():
        leaf.grad = g
    return leaves


# =============================================================================
# Adam optimizer
# =============================================================================

@dataclass
class AdamState:
    """
    Per-parameter first/second moments and the shared step counter.

    Moments are keyed by parameter name and created lazily on the first step.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[Tensor, np.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """
    Apply one bias-corrected Adam update to `params` in place.

    Parameters missing from `grads` (not reached by the loss) are treated as
    having zero gradient. All gradients are checked before any parameter
    moves, so an aborted step leaves both params and state untouched.

    Args:
        params: Named parameter tensors.
        grads: Gradient map as returned by `backward`.
        state: Moments and step counter; updated in place and returned.
        lr: Learning rate, > 0.

    Returns:
        AdamState: The updated state (t incremented by one).

    Raises:
        ValueError: Non-positive lr or moment shapes not matching params.
        NonFiniteGradientError: A gradient contains NaN or inf.
    """
    if lr <= 0:
        raise ValueError(f"Adam learning rate must be > 0, got {lr}")

    resolved: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        g = grads.get(param)
        g = np.zeros_like(param.data) if g is None else g
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        if name in state.m and state.m[name].shape != param.shape:
            raise ValueError(
                f"Adam state for '{name}' has shape {list(state.m[name].shape)}, "
                f"parameter has {list(param.shape)}"
            )
        resolved[name] = g

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, param in params.items():
        g = resolved[name]
        m = state.m.get(name, np.zeros_like(param.data))
        v = state.v.get(name, np.zeros_like(param.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps_adam)
    return state


# =============================================================================
# Gradient checking
# =============================================================================

def _dims(rng: np.random.Generator, count: int, low: int = 1, high: int = 5) -> Tuple[int, ...]:
    return tuple(int(d) for d in rng.integers(low, high + 1, size=count))


def _case_binary(rng):
    shape = _dims(rng, int(rng.integers(1, 4)))
    a = rng.standard_normal(shape)
    # Every other draw broadcasts the second operand over the leading axis
    b_shape = shape[1:] if len(shape) > 1 and rng.random() < 0.5 else shape
    return [a, rng.standard_normal(b_shape)], {}


def _case_unary(rng):
    return [rng.standard_normal(_dims(rng, int(rng.integers(1, 4))))], {}


def _case_conv2d(rng):
    n, c, o = _dims(rng, 3, 1, 3)
    h, w = _dims(rng, 2, 4, 6)
    k = int(rng.choice([1, 2, 3]))
    x = rng.standard_normal((n, c, h, w))
    weight = rng.standard_normal((o, c, k, k))
    bias = rng.standard_normal(o)
    attrs = {"stride": int(rng.choice([1, 2])), "padding": str(rng.choice(PADDING_MODES))}
    return [x, weight, bias], attrs


def _case_leaky_relu(rng):
    shape = _dims(rng, 2)
    # Keep samples away from the kink at 0
    x = rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 2.0, size=shape)
    return [x], {"slope": 0.1}


def _case_power(rng):
    shape = _dims(rng, 2)
    return [rng.uniform(0.5, 2.0, size=shape)], {"exponent": float(rng.uniform(0.3, 2.5))}


def _case_upsample(rng):
    n, c = _dims(rng, 2, 1, 2)
    h, w = _dims(rng, 2, 2, 3)
    return [rng.standard_normal((n, c, h, w))], {"factor": 2}


def _case_concat(rng):
    n, c1, c2 = _dims(rng, 3, 1, 3)
    h, w = _dims(rng, 2, 2, 5)
    return [rng.standard_normal((n, c1, h, w)), rng.standard_normal((n, c2, h, w))], {}


def _case_reshape(rng):
    a, b = _dims(rng, 2, 1, 6)
    return [rng.standard_normal((a, b))], {"shape": (b, a)}


def _case_matmul(rng):
    a, b, c = _dims(rng, 3, 1, 6)
    return [rng.standard_normal((a, b)), rng.standard_normal((b, c))], {}


def _case_scalar(rng):
    return [rng.standard_normal(_dims(rng, 2))], {"scalar": float(rng.uniform(-2.0, 2.0))}


GRADCHECK_CASES: Dict[str, Callable[[np.random.Generator], Tuple[List[np.ndarray], Dict[str, Any]]]] = {
    "add": _case_binary,
    "subtract": _case_binary,
    "multiply": _case_binary,
    "scalar_multiply": _case_scalar,
    "matmul": _case_matmul,
    "conv2d": _case_conv2d,
    "upsample_nearest": _case_upsample,
    "concat": _case_concat,
    "leaky_relu": _case_leaky_relu,
    "sigmoid": _case_unary,
    "softmax": _case_unary,
    "sum": _case_unary,
    "mean": _case_unary,
    "power": _case_power,
    "sq_frobenius": _case_unary,
    "reshape": _case_reshape,
}


def grad_check(
    op_name: str,
    trials: int,
    rng: np.random.Generator,
    attrs: Optional[Dict[str, Any]] = None,
    step: float = GRADCHECK_STEP,
) -> float:
    """
    Compare analytic gradients of an op with central finite differences.

    For each trial, random inputs (all dims <= 6) are drawn, the op output is
    contracted with a random weighting r into L = sum(r * op(inputs)), and
    dL/d(input) from `backward` is compared with
    sum(r * (op(x + h) - op(x - h))) / 2h for every input entry.

    Args:
        op_name: Registered op identifier.
        trials: Number of random draws (>= 1).
        rng: Seeded generator.
        attrs: Optional attribute overrides (e.g. {"stride": 2} for conv2d).
        step: Finite-difference step h.

    Returns:
        float: Max over trials and inputs of ||analytic - numeric|| / max(||analytic||, ||numeric||).
    """
    if op_name not in GRADCHECK_CASES:
        raise ValueError(f"No gradient-check case for op '{op_name}'")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")

    worst = 0.0
    for _ in range(trials):
        arrays, case_attrs = GRADCHECK_CASES[op_name](rng)
        case_attrs.update(attrs or {})

        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        out = forward_op(op_name, inputs, **case_attrs)
        weights = rng.standard_normal(out.shape)
        grads = backward(forward_op("sum", [forward_op("multiply", [out, Tensor(weights)])]))

        for index, tensor in enumerate(inputs):
            analytic = grads.get(tensor, np.zeros_like(tensor.data))
            numeric = np.zeros_like(tensor.data)
            for flat in range(tensor.size):
                shifted = []
                for sign in (1.0, -1.0):
                    trial = [a.copy() for a in arrays]
                    trial[index].flat[flat] += sign * step
                    shifted.append(forward_op(op_name, [Tensor(a) for a in trial], **case_attrs).data)
                numeric.flat[flat] = np.sum(weights * (shifted[0] - shifted[1])) / (2.0 * step)

            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


def run_gradcheck(seed: int, trials: int = 20) -> List[Tuple[str, float, bool]]:
    """
    Grad-check every registered op with its own seeded stream.

    Returns:
        List of (op name, max relative error, passed) rows.
    """
    rows = []
    for offset, name in enumerate(registered_ops()):
        rng = np.random.default_rng([seed, offset])
        error = grad_check(name, trials, rng)
        passed = error < GRADCHECK_TOLERANCE
        logger.debug(f"grad_check {name}: {error:.3e} ({'pass' if passed else 'FAIL'})")
        rows.append((name, error, passed))
    return rows
