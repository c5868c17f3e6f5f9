"""Differentiable tensor arithmetic on numpy arrays.

Every op returns a new ``Tensor``; when any input requires a gradient the
result records its parents and a closure mapping the output gradient to the
input gradients. ``backward`` walks the recorded graph once in reverse
topological order. All data is float32.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float32
DEFAULT_NORM_EPS = 1e-5

GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Scalar = Union[int, float]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an op's arguments fall outside its domain."""


class NonScalarError(ValueError):
    """Raised when backward is started from a non-scalar tensor."""


class Tensor:
    """N-dimensional float32 array participating in the recorded graph."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _grad_fn: Optional[GradFn] = None,
        _op: str = "leaf",
    ):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        if self.size != 1:
            raise NonScalarError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Leaf sharing this tensor's values, cut from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + grad.reshape(self.shape)

    # Arithmetic
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=DTYPE))


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], grad_fn: GradFn, op: str) -> Tensor:
    """Wrap an op result, recording the graph only when a parent needs gradients."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _grad_fn=grad_fn, _op=op)
    return Tensor(data, _op=op)


class Graph:
    """Op records reachable from a root, inputs always before their consumers."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring a gradient.

    Leaves in ``params`` that the loss does not reach receive a zero gradient.
    """
    if loss.size != 1:
        raise NonScalarError(f"backward needs a scalar loss, got shape {loss.shape}")

    graph = Graph.trace(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}

    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node._accumulate(grad)
            continue
        for parent, parent_grad in zip(node._parents, node._grad_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros(p.shape, dtype=DTYPE)
    return graph


# ---------- Elementwise arithmetic ----------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def tensor_sum(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(x.data.sum(), dtype=DTYPE), (x,), grad_fn, "sum")


def tensor_mean(x: Tensor) -> Tensor:
    scale = DTYPE(1.0 / x.size)

    def grad_fn(g):
        return (np.broadcast_to(g * scale, x.shape),)

    return _make(np.asarray(x.data.mean(), dtype=DTYPE), (x,), grad_fn, "mean")


# ---------- Convolutions ----------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def _im2col(padded: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, Ho, Wo, k, k) strided window view."""
    windows = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def _col2im(cols: np.ndarray, padded_shape: Tuple[int, ...], kernel: int, stride: int) -> np.ndarray:
    """Scatter-add (N, C, Ho, Wo, k, k) windows back onto a (N, C, Hp, Wp) grid."""
    out = np.zeros(padded_shape, dtype=DTYPE)
    out_h, out_w = cols.shape[2], cols.shape[3]
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += cols[:, :, :, :, i, j]
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _check_conv_args(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, pad: int, in_axis: int, out_axis: int):
    if x.ndim != 4:
        raise ShapeMismatchError(f"Expected input of rank 4 (N, C, H, W), got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeMismatchError(f"Expected square rank-4 kernel, got shape {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeMismatchError(
            f"Input has {x.shape[1]} channels but kernel {weight.shape} expects {weight.shape[in_axis]}"
        )
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise ShapeMismatchError(f"Bias shape {bias.shape} does not match {weight.shape[out_axis]} output channels")
    kernel = weight.shape[2]
    if kernel < 1 or stride < 1 or pad < 0:
        raise DomainError(f"Invalid convolution hyperparameters k={kernel}, stride={stride}, pad={pad}")
    return kernel


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2D cross-correlation: (N, Cin, H, W) * (Cout, Cin, k, k)."""
    kernel = _check_conv_args(x, weight, bias, stride, pad, in_axis=1, out_axis=0)
    n, _, h, w = x.shape
    if h + 2 * pad < kernel or w + 2 * pad < kernel:
        raise DomainError(f"Kernel {kernel} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    padded = _pad(x.data, pad)
    cols = _im2col(padded, kernel, stride)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gx = _col2im(dcols, padded.shape, kernel, stride)[:, :, pad:pad + h, pad:pad + w]
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of ``conv2d``: (N, Cin, H, W) * (Cin, Cout, k, k)."""
    kernel = _check_conv_args(x, weight, bias, stride, pad, in_axis=0, out_axis=1)
    n, _, h, w = x.shape
    out_h = conv_transpose_output_size(h, kernel, stride, pad)
    out_w = conv_transpose_output_size(w, kernel, stride, pad)
    if out_h < 1 or out_w < 1:
        raise DomainError(f"Transposed convolution output would be {out_h}x{out_w}")

    cout = weight.shape[1]
    full_h = (h - 1) * stride + kernel
    full_w = (w - 1) * stride + kernel
    cols = np.tensordot(x.data, weight.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    out = _col2im(cols, (n, cout, full_h, full_w), kernel, stride)[:, :, pad:pad + out_h, pad:pad + out_w]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gx = gw = gb = None
        gcols = _im2col(_pad(g, pad), kernel, stride)
        if x.requires_grad:
            gx = np.tensordot(gcols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "conv_transpose2d")


# ---------- Normalization ----------

def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = DEFAULT_NORM_EPS) -> Tensor:
    """Per-sample, per-channel standardisation followed by an affine map."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"Expected input of rank 4 (N, C, H, W), got shape {x.shape}")
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeMismatchError(f"Scale {scale.shape} / shift {shift.shape} do not match {channels} channels")
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")

    count = x.shape[2] * x.shape[3]
    centred = x.data - x.data.mean(axis=(2, 3), keepdims=True)
    var = (centred * centred).mean(axis=(2, 3), keepdims=True)
    inv_std = DTYPE(1.0) / np.sqrt(var + DTYPE(eps))
    xhat = centred * inv_std
    gamma = scale.data[None, :, None, None]
    out = gamma * xhat + shift.data[None, :, None, None]

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma
            gx = (inv_std / DTYPE(count)) * (
                DTYPE(count) * dxhat
                - dxhat.sum(axis=(2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
            )
        gscale = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        return gx, gscale, gshift

    return _make(out, (x, scale, shift), grad_fn, "instance_norm")


# ---------- Activations ----------

class Activation(str, Enum):
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, DTYPE(1.0) / (DTYPE(1.0) + e), e / (DTYPE(1.0) + e)).astype(DTYPE)


def activation(x: Tensor, kind: Union[Activation, str], slope: float = 0.2) -> Tensor:
    """Elementwise nonlinearity; ``slope`` only applies to leaky_relu."""
    kind = Activation(kind)

    if kind is Activation.RELU:
        positive = x.data > 0
        return _make(np.where(positive, x.data, DTYPE(0.0)), (x,), lambda g: (g * positive,), "relu")

    if kind is Activation.LEAKY_RELU:
        if not 0.0 < slope < 1.0:
            raise DomainError(f"leaky_relu slope must be in (0, 1), got {slope}")
        positive = x.data > 0
        s = DTYPE(slope)
        return _make(
            np.where(positive, x.data, s * x.data),
            (x,),
            lambda g: (np.where(positive, g, s * g),),
            "leaky_relu",
        )

    if kind is Activation.TANH:
        out = np.tanh(x.data)
        return _make(out, (x,), lambda g: (g * (DTYPE(1.0) - out * out),), "tanh")

    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (DTYPE(1.0) - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    return activation(x, Activation.RELU)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return activation(x, Activation.LEAKY_RELU, slope)


def tanh(x: Tensor) -> Tensor:
    return activation(x, Activation.TANH)


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, Activation.SIGMOID)


# ---------- Channel plumbing ----------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeMismatchError(f"concat_channels needs rank-4 tensors, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeMismatchError(f"Batch/spatial mismatch: {a.shape} vs {b.shape}")
    split = a.shape[1]

    def grad_fn(g):
        return g[:, :split], g[:, split:]

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), grad_fn, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 4 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeMismatchError(f"Cannot take channels [{start}, {stop}) of shape {x.shape}")

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop], (x,), grad_fn, "slice_channels")


# ---------- Losses ----------

class LossKind(str, Enum):
    BCE_WITH_LOGITS = "bce_with_logits"
    L1 = "l1"
    MSE = "mse"


def loss(kind: Union[LossKind, str], pred: Tensor, target) -> Tensor:
    """Mean loss over all elements, returned as a 0-d tensor."""
    kind = LossKind(kind)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"Prediction shape {pred.shape} does not match target {target.shape}")

    n = DTYPE(pred.size)
    x, t = pred.data, target.data

    if kind is LossKind.BCE_WITH_LOGITS:
        if t.size and (t.min() < 0 or t.max() > 1):
            raise DomainError("bce_with_logits targets must lie in [0, 1]")
        # max(x, 0) - x*t + log(1 + exp(-|x|)) never overflows
        per_element = np.maximum(x, DTYPE(0.0)) - x * t + np.log1p(np.exp(-np.abs(x)))

        def grad_fn(g):
            return g * (_stable_sigmoid(x) - t) / n, g * (-x) / n

    elif kind is LossKind.L1:
        diff = x - t
        per_element = np.abs(diff)
        sign = np.sign(diff)

        def grad_fn(g):
            return g * sign / n, -g * sign / n

    else:
        diff = x - t
        per_element = diff * diff

        def grad_fn(g):
            return g * DTYPE(2.0) * diff / n, -g * DTYPE(2.0) * diff / n

    value = np.asarray(per_element.mean(), dtype=DTYPE)
    return _make(value, (pred, target), grad_fn, kind.value)


def bce_with_logits(pred: Tensor, target) -> Tensor:
    return loss(LossKind.BCE_WITH_LOGITS, pred, target)


def l1_loss(pred: Tensor, target) -> Tensor:
    return loss(LossKind.L1, pred, target)


def mse_loss(pred: Tensor, target) -> Tensor:
    return loss(LossKind.MSE, pred, target)


# ---------- Regularisation ----------

def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) in training mode."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise DomainError("dropout in training mode needs a seeded generator")

    mask = (rng.random(x.shape) >= p).astype(DTYPE) * DTYPE(1.0 / (1.0 - p))
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------- Finite-difference harness ----------

@dataclass
class GradCheckResult:
    """Outcome of a central-difference gradient check."""

    max_error: float
    checked: int
    skipped: int
    worst: Optional[Tuple[int, int]] = None

    def passed(self, rtol: float = 1e-2) -> bool:
        return self.checked > 0 and self.max_error < rtol


def _evaluate(fn: Callable[[], Tensor], weights: np.ndarray) -> float:
    return float(np.sum(fn().data.astype(np.float64) * weights))


def gradient_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-3,
    rtol: float = 1e-2,
    floor: float = 1e-3,
    seed: int = 0,
) -> GradCheckResult:
    """Compare reverse-mode gradients with central differences.

    ``fn`` is re-evaluated with each element of ``tensors`` perturbed in place.
    Non-scalar outputs are reduced with fixed random weights. The per-element
    error is |analytic - numeric| / max(|analytic|, |numeric|, s) where s is the
    larger of ``floor`` and a tenth of the largest analytic gradient over all
    ``tensors``. Elements whose forward and backward one-sided differences
    disagree by more than ``rtol`` of the same denominator straddle a kink of a
    piecewise-linear op and are skipped.
    """
    out = fn()
    weights = np.random.default_rng(seed).standard_normal(out.shape).astype(DTYPE).astype(np.float64)
    for t in tensors:
        t.grad = None
    backward(tensor_sum(mul(out, Tensor(weights))), tensors)
    analytic = [t.grad.astype(np.float64).reshape(-1) for t in tensors]
    scale = max(floor, 0.1 * max(float(np.abs(a).max(initial=0.0)) for a in analytic))

    max_error, checked, skipped, worst = 0.0, 0, 0, None
    centre = _evaluate(fn, weights)
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + DTYPE(step)
            x_plus = float(flat[idx])
            f_plus = _evaluate(fn, weights)
            flat[idx] = original - DTYPE(step)
            x_minus = float(flat[idx])
            f_minus = _evaluate(fn, weights)
            flat[idx] = original

            forward_diff = (f_plus - centre) / (x_plus - float(original))
            backward_diff = (centre - f_minus) / (float(original) - x_minus)
            if abs(forward_diff - backward_diff) > rtol * max(abs(forward_diff), abs(backward_diff), scale):
                skipped += 1
                continue

            numeric = (f_plus - f_minus) / (x_plus - x_minus)
            a = analytic[ti][idx]
            error = abs(a - numeric) / max(abs(a), abs(numeric), scale)
            checked += 1
            if error > max_error:
                max_error, worst = error, (ti, idx)

    if skipped:
        logger.debug(f"gradient_check skipped {skipped} elements at non-smooth points")
    return GradCheckResult(max_error=max_error, checked=checked, skipped=skipped, worst=worst)
