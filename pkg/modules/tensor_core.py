"""
Tensor Core Module
------------------
Dense tensors backed by numpy arrays, with a record-on-forward tape for
reverse-mode automatic differentiation.

Every differentiable operation is a ``Function`` subclass. Applying one
stores the function on the output tensor; ``backward`` later walks those
records in reverse topological order. Samples are processed one at a time
([C, H, W] images), so the only broadcast supported is a single [1, H, W]
map over the channels of a [C, H, W] tensor.
"""
import logging
import sys
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from config import DEBUG_NANS
from modules.errors import DimensionError, LabelError, NumericalError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_PRECISIONS = {"float32": np.float32, "float64": np.float64}


class _Settings(threading.local):
    dtype = np.float32
    debug_nans = DEBUG_NANS
    grad_enabled = True


_settings = _Settings()


# ============================================================================
# PRECISION / MODES
# ============================================================================

def set_precision(name: str) -> None:
    """
    Select the dtype of newly created tensors.

    Args:
        name: "float32" (training) or "float64" (gradient checks)
    """
    if name not in _PRECISIONS:
        raise ValueError(f"Unknown precision: {name} (expected one of {list(_PRECISIONS)})")
    _settings.dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _settings.dtype


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch tensor precision."""
    previous = _settings.dtype
    set_precision(name)
    try:
        yield
    finally:
        _settings.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape."""
    previous = _settings.grad_enabled
    _settings.grad_enabled = False
    try:
        yield
    finally:
        _settings.grad_enabled = previous


# ============================================================================
# TENSOR
# ============================================================================

class Tensor:
    """
    A dense array with optional gradient tracking.

    Attributes:
        data: contiguous numpy array (row-major)
        requires_grad: whether gradients flow into this tensor
        grad: gradient accumulator with the same shape as data, or None
        creator: the Function that produced this tensor (None for leaves)
        name: optional label used by parameter stores and checkpoints
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=_settings.dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional["Function"] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, creator: Optional["Function"], requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=_settings.dtype)
        out.requires_grad = requires_grad
        out.grad = None
        out.creator = creator
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut from the tape; never receives a gradient."""
        out = Tensor._from_op(self.data, None, False)
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __radd__ = __add__
    __rmul__ = __mul__


# ============================================================================
# FUNCTION BASE AND TAPE
# ============================================================================

class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which
    maps the gradient of the output to one gradient per input tensor (None
    for inputs that receive no gradient). ``backward`` must not modify any
    saved state, so a tape can be replayed.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        func = cls(*inputs)
        out_data = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = _settings.grad_enabled and any(t.requires_grad for t in inputs)
        out = Tensor._from_op(out_data, func if requires_grad else None, requires_grad)
        if _settings.debug_nans and not np.all(np.isfinite(out.data)):
            raise NumericalError(f"{cls.__name__} produced non-finite values")
        return out


class Graph:
    """
    Ordered record of the operations that produced a scalar loss.

    ``nodes`` lists every non-leaf tensor in topological order (inputs before
    outputs). ``run`` visits each node exactly once in reverse order.
    """

    def __init__(self, loss: Tensor):
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.nodes: List[Tensor] = []
        self.leaves: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                self.nodes.append(tensor)
                continue
            if id(tensor) in seen or not tensor.requires_grad:
                continue
            seen.add(id(tensor))
            if tensor.creator is None:
                self.leaves.append(tensor)
                continue
            stack.append((tensor, True))
            for parent in tensor.creator.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def run(self) -> Dict[int, np.ndarray]:
        """
        Propagate adjoints from the loss.

        Returns:
            Mapping from id(leaf tensor) to d(loss)/d(leaf)
        """
        adjoints: Dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for tensor in reversed(self.nodes):
            grad = adjoints.pop(id(tensor), None)
            if grad is None:
                continue
            parent_grads = tensor.creator.backward(grad)
            for parent, parent_grad in zip(tensor.creator.inputs, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + parent_grad
                else:
                    adjoints[key] = parent_grad
        return {id(leaf): adjoints.get(id(leaf), np.zeros_like(leaf.data)) for leaf in self.leaves}


def backward(loss: Tensor, accumulate: bool = False) -> Graph:
    """
    Compute d(loss)/d(leaf) for every tracked leaf reachable from loss.

    Args:
        loss: scalar tensor
        accumulate: add into existing ``grad`` instead of overwriting it

    Returns:
        The Graph that was replayed (can be run again for identical results)
    """
    graph = Graph(loss)
    grads = graph.run()
    for leaf in graph.leaves:
        grad = grads[id(leaf)]
        if accumulate and leaf.grad is not None:
            leaf.grad = leaf.grad + grad
        else:
            leaf.grad = grad.copy()
    return graph


def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """
    Gradients of loss w.r.t. named parameters, without touching ``grad``.

    Parameters unreachable from loss get zero gradients. Safe to call from
    several threads on independent tapes.
    """
    grads = Graph(loss).run()
    return {name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()}


# ============================================================================
# ELEMENTWISE
# ============================================================================

def _broadcast_kind(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]) -> Optional[str]:
    """Return None for equal shapes, 'a' or 'b' for the operand broadcast over channels."""
    if a_shape == b_shape:
        return None
    if len(a_shape) == 3 and len(b_shape) == 3 and a_shape[1:] == b_shape[1:]:
        if b_shape[0] == 1:
            return "b"
        if a_shape[0] == 1:
            return "a"
    raise DimensionError(f"Shape mismatch: {a_shape} vs {b_shape}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0, keepdims=True)


class Add(Function):
    def forward(self, a, b):
        _broadcast_kind(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _reduce_to(grad, a.shape), _reduce_to(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_kind(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return _reduce_to(grad, a.shape), _reduce_to(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_kind(a.shape, b.shape)
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return _reduce_to(grad * b.data, a.shape), _reduce_to(grad * a.data, b.shape)


class ScalarOp(Function):
    def forward(self, a, value: float = 0.0, kind: str = "mul"):
        self.value = value
        self.kind = kind
        if kind == "add":
            return a + value
        if kind == "sub":
            return a - value
        return a * value

    def backward(self, grad):
        if self.kind == "mul":
            return (grad * self.value,)
        return (grad,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


def elementwise(op_kind: str, a: Tensor, b: Union[Tensor, float, int, None] = None) -> Tensor:
    """
    Elementwise add/sub/mul/relu/scale.

    Args:
        op_kind: one of "add", "sub", "mul", "relu", "scale"
        a: first operand
        b: tensor of equal shape, a [1,H,W] map to broadcast over a [C,H,W]
           tensor, or a scalar (ignored for relu)

    Returns:
        Result tensor

    Raises:
        DimensionError: on shape mismatch
    """
    if op_kind == "relu":
        return Relu.apply(a)
    if op_kind == "scale" or not isinstance(b, Tensor):
        if b is None:
            raise ValueError(f"{op_kind} needs a second operand")
        kind = "mul" if op_kind == "scale" else op_kind
        if kind not in ("add", "sub", "mul"):
            raise ValueError(f"Unknown elementwise op: {op_kind}")
        return ScalarOp.apply(a, value=float(b), kind=kind)
    if op_kind == "add":
        return Add.apply(a, b)
    if op_kind == "sub":
        return Sub.apply(a, b)
    if op_kind == "mul":
        return Mul.apply(a, b)
    raise ValueError(f"Unknown elementwise op: {op_kind}")


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def scale(a: Tensor, value: float) -> Tensor:
    return ScalarOp.apply(a, value=float(value), kind="mul")


# ============================================================================
# SHAPE AND REDUCTION
# ============================================================================

class Reshape(Function):
    def forward(self, a, shape: Tuple[int, ...] = ()):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Sum(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.sum())

    def backward(self, grad):
        return (np.full(self.in_shape, grad.reshape(-1)[0], dtype=grad.dtype),)


class Mean(Function):
    def forward(self, a, axis: Optional[Tuple[int, ...]] = None):
        self.in_shape = a.shape
        self.axis = axis
        self.count = a.size if axis is None else int(np.prod([a.shape[i] for i in axis]))
        return np.asarray(a.mean(axis=axis))

    def backward(self, grad):
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.in_shape).copy(),)


class Take(Function):
    def forward(self, a, index: int = 0):
        if not 0 <= index < a.shape[0]:
            raise DimensionError(f"Index {index} out of range for leading dim {a.shape[0]}")
        self.index = index
        self.in_shape = a.shape
        return a[index:index + 1].copy()

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        out[self.index:self.index + 1] = grad
        return (out,)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"Cannot reshape {a.shape} into {tuple(shape)}")
    return Reshape.apply(a, shape=tuple(shape))


def flatten(a: Tensor) -> Tensor:
    return Reshape.apply(a, shape=(a.size,))


def tensor_sum(a: Tensor) -> Tensor:
    return Sum.apply(a)


def mean(a: Tensor, axis: Optional[Sequence[int]] = None) -> Tensor:
    return Mean.apply(a, axis=None if axis is None else tuple(axis))


def take(a: Tensor, index: int) -> Tensor:
    """Select entry ``index`` of the leading axis, keeping it as size 1."""
    return Take.apply(a, index=int(index))


# ============================================================================
# CONVOLUTION
# ============================================================================

def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    if stride < 1 or padding < 0:
        raise DimensionError(f"Invalid stride {stride} / padding {padding}")
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(f"Kernel {kernel} does not fit input {size} with padding {padding}")
    if span % stride:
        raise DimensionError(
            f"Non-integer output size: ({size} + 2*{padding} - {kernel}) / {stride} + 1"
        )
    return span // stride + 1


def _windows(padded: np.ndarray, k_h: int, k_w: int, stride: int) -> np.ndarray:
    """[C, Hp, Wp] -> [C, Ho, Wo, kH, kW] strided view."""
    return sliding_window_view(padded, (k_h, k_w), axis=(1, 2))[:, ::stride, ::stride]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def _col2im(cols: np.ndarray, out_h: int, out_w: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add [C, kH, kW, H, W] patches onto a canvas, then crop the padding."""
    channels, k_h, k_w, h, w = cols.shape
    canvas = np.zeros((channels, (h - 1) * stride + k_h, (w - 1) * stride + k_w), dtype=cols.dtype)
    for i in range(k_h):
        for j in range(k_w):
            canvas[:, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride] += cols[:, i, j]
    return canvas[:, padding:padding + out_h, padding:padding + out_w]


class Conv2d(Function):
    def forward(self, x, w, b=None, stride: int = 1, padding: int = 0):
        if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
            raise DimensionError(f"conv2d: input {x.shape} does not match weight {w.shape}")
        if b is not None and b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d: bias {b.shape} does not match {w.shape[0]} outputs")
        _conv_out_size(x.shape[1], w.shape[2], stride, padding)
        _conv_out_size(x.shape[2], w.shape[3], stride, padding)
        self.stride, self.padding = stride, padding
        self.windows = _windows(_pad(x, padding), w.shape[2], w.shape[3], stride)
        out = np.tensordot(w, self.windows, axes=([1, 2, 3], [0, 3, 4]))
        if b is not None:
            out = out + b[:, None, None]
        return out

    def backward(self, grad):
        x, w = self.inputs[0].data, self.inputs[1].data
        grad_w = np.tensordot(grad, self.windows, axes=([1, 2], [1, 2]))
        cols = np.tensordot(w, grad, axes=([0], [0]))
        grad_x = _col2im(cols, x.shape[1], x.shape[2], self.stride, self.padding)
        if len(self.inputs) == 3:
            return grad_x, grad_w, grad.sum(axis=(1, 2))
        return grad_x, grad_w


class Conv2dTranspose(Function):
    def forward(self, x, w, b=None, stride: int = 1, padding: int = 0):
        if x.ndim != 3 or w.ndim != 4 or w.shape[0] != x.shape[0]:
            raise DimensionError(f"conv2d_transpose: input {x.shape} does not match weight {w.shape}")
        if stride < 1 or padding < 0:
            raise DimensionError(f"Invalid stride {stride} / padding {padding}")
        out_h = (x.shape[1] - 1) * stride - 2 * padding + w.shape[2]
        out_w = (x.shape[2] - 1) * stride - 2 * padding + w.shape[3]
        if out_h < 1 or out_w < 1:
            raise DimensionError(f"conv2d_transpose: empty output for input {x.shape}")
        if b is not None and b.shape != (w.shape[1],):
            raise DimensionError(f"conv2d_transpose: bias {b.shape} does not match {w.shape[1]} outputs")
        self.stride, self.padding = stride, padding
        cols = np.tensordot(w, x, axes=([0], [0]))
        out = _col2im(cols, out_h, out_w, stride, padding)
        if b is not None:
            out = out + b[:, None, None]
        return out

    def backward(self, grad):
        x, w = self.inputs[0].data, self.inputs[1].data
        windows = _windows(_pad(grad, self.padding), w.shape[2], w.shape[3], self.stride)
        grad_x = np.tensordot(w, windows, axes=([1, 2, 3], [0, 3, 4]))
        grad_w = np.tensordot(x, windows, axes=([1, 2], [1, 2]))
        if len(self.inputs) == 3:
            return grad_x, grad_w, grad.sum(axis=(1, 2))
        return grad_x, grad_w


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation of a [C_in, H, W] input with [C_out, C_in, kH, kW] weights.

    Output size per axis is (H + 2p - kH) / stride + 1, which must be an integer.
    """
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*inputs, stride=stride, padding=padding)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """
    Transposed convolution: the input-gradient of ``conv2d`` for the same weight.

    Args:
        x: [C_in, H, W]
        weight: [C_in, C_out, kH, kW] (same array a conv2d mapping C_out -> C_in uses)
        bias: optional [C_out]

    Returns:
        [C_out, (H-1)*stride - 2p + kH, (W-1)*stride - 2p + kW]
    """
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv2dTranspose.apply(*inputs, stride=stride, padding=padding)


# ============================================================================
# POOLING
# ============================================================================

class Pool2d(Function):
    def forward(self, x, kind: str = "max", window: int = 2, stride: int = 2):
        if x.ndim != 3:
            raise DimensionError(f"pool2d expects [C, H, W], got {x.shape}")
        out_h = _conv_out_size(x.shape[1], window, stride, 0)
        out_w = _conv_out_size(x.shape[2], window, stride, 0)
        self.kind, self.window, self.stride = kind, window, stride
        self.out_hw = (out_h, out_w)
        flat = _windows(x, window, window, stride).reshape(x.shape[0], out_h, out_w, window * window)
        if kind == "max":
            self.argmax = flat.argmax(axis=-1)
            return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]
        if kind == "avg":
            return flat.mean(axis=-1)
        raise ValueError(f"Unknown pool kind: {kind}")

    def backward(self, grad):
        x = self.inputs[0].data
        out_h, out_w = self.out_hw
        k = self.window
        if self.kind == "max":
            flat = np.zeros((x.shape[0], out_h, out_w, k * k), dtype=grad.dtype)
            np.put_along_axis(flat, self.argmax[..., None], grad[..., None], axis=-1)
        else:
            flat = np.repeat(grad[..., None] / (k * k), k * k, axis=-1)
        cols = flat.reshape(x.shape[0], out_h, out_w, k, k).transpose(0, 3, 4, 1, 2)
        grad_x = np.zeros_like(x, dtype=grad.dtype)
        covered = _col2im(cols, x.shape[1], x.shape[2], self.stride, 0)
        grad_x[:, :covered.shape[1], :covered.shape[2]] = covered
        return (grad_x,)


class ChannelPool(Function):
    def forward(self, x, kind: str = "avg"):
        if x.ndim != 3:
            raise DimensionError(f"channel_pool expects [N, H, W], got {x.shape}")
        self.kind = kind
        if kind == "avg":
            return x.mean(axis=0, keepdims=True)
        if kind == "max":
            self.argmax = x.argmax(axis=0)[None]
            return np.take_along_axis(x, self.argmax, axis=0)
        raise ValueError(f"Unknown pool kind: {kind}")

    def backward(self, grad):
        x = self.inputs[0].data
        if self.kind == "avg":
            return (np.broadcast_to(grad / x.shape[0], x.shape).copy(),)
        out = np.zeros(x.shape, dtype=grad.dtype)
        np.put_along_axis(out, self.argmax, grad, axis=0)
        return (out,)


def pool2d(x: Tensor, kind: str = "max", window: int = 2, stride: int = 2) -> Tensor:
    """Spatial max/avg pooling of a [C, H, W] tensor; the window must tile exactly."""
    return Pool2d.apply(x, kind=kind, window=window, stride=stride)


def channel_pool(x: Tensor, kind: str = "avg") -> Tensor:
    """Reduce [N, H, W] across channels at each location -> [1, H, W]."""
    return ChannelPool.apply(x, kind=kind)


# ============================================================================
# DENSE AND LOSSES
# ============================================================================

class Dense(Function):
    def forward(self, x, w, b):
        if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
            raise DimensionError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape}")
        return w @ x + b

    def backward(self, grad):
        x, w = self.inputs[0].data, self.inputs[1].data
        return w.T @ grad, np.outer(grad, x), grad


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, label: int = 0):
        if logits.ndim != 1:
            raise DimensionError(f"softmax_cross_entropy expects [C] logits, got {logits.shape}")
        if not 0 <= label < logits.shape[0]:
            raise LabelError(f"Label {label} out of range [0, {logits.shape[0]})")
        self.label = label
        top = int(logits.argmax())
        shifted = logits - logits[top]
        exp = np.exp(shifted)
        self.probs = exp / exp.sum()
        # log-sum-exp with the max term split off keeps tiny losses representable
        rest = np.delete(exp, top).sum()
        return np.asarray(np.log1p(rest) - shifted[label])

    def backward(self, grad):
        g = self.probs.copy()
        g[self.label] -= 1.0
        return (g * grad.reshape(-1)[0],)


class MSELoss(Function):
    def forward(self, pred, target: Optional[np.ndarray] = None):
        if target is None or target.shape != pred.shape:
            raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {None if target is None else target.shape}")
        self.diff = pred - target
        return np.asarray(np.mean(self.diff * self.diff))

    def backward(self, grad):
        return (grad.reshape(-1)[0] * 2.0 * self.diff / self.diff.size,)


class MinMaxNormalize(Function):
    def forward(self, x, eps: float = 1e-8):
        flat = x.reshape(-1)
        self.lo_index = int(flat.argmin())
        self.hi_index = int(flat.argmax())
        lo, hi = flat[self.lo_index], flat[self.hi_index]
        self.denom = hi - lo + eps
        self.centered = x - lo
        return self.centered / self.denom

    def backward(self, grad):
        d = self.denom
        grad_x = grad / d
        s1 = grad.sum()
        s2 = (grad * self.centered).sum()
        flat = grad_x.reshape(-1)
        flat[self.lo_index] += -s1 / d + s2 / (d * d)
        flat[self.hi_index] += -s2 / (d * d)
        return (flat.reshape(grad.shape),)


class L2Normalize(Function):
    def forward(self, x, eps: float = 1e-8):
        self.norm = np.sqrt((x * x).sum() + eps)
        self.out = x / self.norm
        return self.out

    def backward(self, grad):
        return ((grad - self.out * (grad * self.out).sum()) / self.norm,)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for x [K], weight [J, K], bias [J]."""
    return Dense.apply(x, weight, bias)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """
    -log softmax(logits)[label] as a scalar tensor.

    Raises:
        LabelError: if label is outside [0, C)
    """
    return SoftmaxCrossEntropy.apply(logits, label=int(label))


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target array."""
    return MSELoss.apply(pred, target=np.asarray(target, dtype=pred.data.dtype))


def minmax_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Rescale all values of x to [0, 1] using its global min and max."""
    return MinMaxNormalize.apply(x, eps=eps)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """x / sqrt(sum(x^2) + eps) over all elements; a zero input stays zero."""
    return L2Normalize.apply(x, eps=eps)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


# ============================================================================
# GRADIENT CHECK
# ============================================================================

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""
    max_rel_err: float
    passed: bool
    checked: int
    worst: str = ""


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                   step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """
    Compare backward() against central finite differences, element by element.

    rel_err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

    Args:
        fn: callable mapping the input tensors to a scalar tensor
        inputs: tensors to perturb (those with requires_grad=False are skipped)
        step: finite-difference step
        tolerance: pass threshold on the max relative error

    Returns:
        GradCheckReport; failures are reported, not raised
    """
    tracked = [t for t in inputs if t.requires_grad]
    if any(t.data.dtype != np.float64 for t in tracked):
        raise NumericalError("gradient_check needs float64 tensors (use precision('float64'))")

    loss = fn(*inputs)
    analytic = Graph(loss).run()

    worst, worst_label, checked = 0.0, "", 0
    with no_grad():
        for position, tensor in enumerate(tracked):
            a_grad = analytic.get(id(tensor), np.zeros_like(tensor.data))
            flat = tensor.data.reshape(-1)
            a_flat = a_grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = fn(*inputs).item()
                flat[i] = original - step
                minus = fn(*inputs).item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * step)
                rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1e-8)
                checked += 1
                if rel > worst:
                    label = tensor.name or f"input{position}"
                    worst, worst_label = rel, f"{label}[{i}]"
    return GradCheckReport(max_rel_err=float(worst), passed=worst <= tolerance,
                           checked=checked, worst=worst_label)
