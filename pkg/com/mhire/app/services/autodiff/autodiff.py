"""
Reverse-mode automatic differentiation over dense float64 arrays.

A `Tensor` is both the value and the graph node: tensors produced by a
`Function` keep a reference to it, and `backward` walks those references in
reverse topological order. Image tensors use the NCHW convention.
"""
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from com.mhire.app.config.errors import TensorError
from com.mhire.app.services.autodiff.autodiff_schema import OperationKind

logger = logging.getLogger(__name__)

DTYPE = np.float64


class Tensor:
    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        creator: Optional["Function"] = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def kind(self) -> Optional[OperationKind]:
        return self.creator.kind if self.creator is not None else None

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self.creator.inputs if self.creator is not None else ()

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, _as_tensor(other))

    def __radd__(self, other) -> "Tensor":
        return add(_as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, _as_tensor(other))

    def __rmul__(self, other) -> "Tensor":
        return mul(_as_tensor(other), self)

    def __sub__(self, other) -> "Tensor":
        return add(self, mul(_as_tensor(other), Tensor(-1.0)))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other), mul(self, Tensor(-1.0)))

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, kind={self.kind})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """A differentiable operation. Subclasses implement forward and backward on raw arrays."""

    kind: OperationKind

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        func = cls(*inputs)
        for key, value in kwargs.items():
            setattr(func, key, value)
        out = func.forward(*(t.data for t in inputs))
        if not np.all(np.isfinite(out)):
            raise TensorError("non-finite", f"{cls.kind.value} produced NaN or Inf")
        requires_grad = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)


class Add(Function):
    kind = OperationKind.ELEMENTWISE_ADD

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Mul(Function):
    kind = OperationKind.ELEMENTWISE_MUL

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Relu(Function):
    kind = OperationKind.RELU

    def forward(self, x):
        self.positive = x > 0
        return np.where(self.positive, x, 0.0)

    def backward(self, grad):
        return (np.where(self.positive, grad, 0.0),)


class Reshape(Function):
    kind = OperationKind.RESHAPE

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Sum(Function):
    kind = OperationKind.SUM

    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.full(self.in_shape, float(grad), dtype=DTYPE),)


class Mse(Function):
    kind = OperationKind.MSE

    def forward(self, a, b):
        self.diff = a - b
        return np.asarray(np.mean(self.diff * self.diff))

    def backward(self, grad):
        g = float(grad) * 2.0 * self.diff / self.diff.size
        return g, -g


class FullyConnected(Function):
    """y = flatten(x) @ W + b with W of shape (in, out)."""

    kind = OperationKind.FULLY_CONNECTED

    def forward(self, x, weight, bias):
        self.in_shape = x.shape
        self.x2 = x.reshape(x.shape[0], -1)
        self.weight = weight
        return self.x2 @ weight + bias

    def backward(self, grad):
        dx = (grad @ self.weight.T).reshape(self.in_shape)
        return dx, self.x2.T @ grad, grad.sum(axis=0)


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """Cross-correlation, weight (F, C, kh, kw), im2col through strided windows."""

    kind = OperationKind.CONV2D

    def forward(self, x, weight, bias):
        s, p = self.stride, self.padding
        self.in_shape = x.shape
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        kh, kw = weight.shape[2:]
        # (B, C, Ho, Wo, kh, kw)
        self.windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        self.weight = weight
        self.padded_shape = x.shape
        out = np.tensordot(self.windows, weight, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + bias[None, :, None, None]

    def backward(self, grad):
        s, p = self.stride, self.padding
        kh, kw = self.weight.shape[2:]
        ho, wo = grad.shape[2:]
        d_weight = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        d_bias = grad.sum(axis=(0, 2, 3))
        dxp = np.zeros(self.padded_shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, self.weight[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp, d_weight, d_bias


class MaxPool2d(Function):
    kind = OperationKind.MAXPOOL2D

    def forward(self, x):
        k, s = self.size, self.stride
        self.in_shape = x.shape
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = windows.reshape(windows.shape[:4] + (k * k,))
        self.argmax = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        k, s = self.size, self.stride
        ho, wo = grad.shape[2:]
        dx = np.zeros(self.in_shape, dtype=DTYPE)
        for pos in range(k * k):
            i, j = divmod(pos, k)
            routed = np.where(self.argmax == pos, grad, 0.0)
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += routed
        return (dx,)


class SoftmaxCrossEntropy(Function):
    """Mean over the batch of -log softmax(logits)[label]; labels are fixed integers."""

    kind = OperationKind.SOFTMAX_CROSS_ENTROPY

    def forward(self, logits):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (logits.shape[0],):
            raise TensorError("shape-mismatch", f"labels {labels.shape} vs logits {logits.shape}")
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise TensorError("label-out-of-range", f"labels must lie in [0, {logits.shape[1]})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        self.probs = np.exp(log_probs)
        self.labels_idx = labels
        picked = log_probs[np.arange(labels.size), labels]
        return np.asarray(-picked.mean())

    def backward(self, grad):
        d = self.probs.copy()
        d[np.arange(self.labels_idx.size), self.labels_idx] -= 1.0
        return (float(grad) * d / self.labels_idx.size,)


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise TensorError("shape-mismatch", f"{a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorError("shape-mismatch", f"cannot broadcast {a.shape} with {b.shape}")
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorError("shape-mismatch", f"cannot broadcast {a.shape} with {b.shape}")
    return Mul.apply(a, b)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def tensor_sum(x: Tensor) -> Tensor:
    return Sum.apply(x)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements (the feature distance D)."""
    _check_same_shape(a, b)
    return Mse.apply(a, b)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    in_features = int(np.prod(x.shape[1:]))
    if weight.shape[0] != in_features or bias.shape != (weight.shape[1],):
        raise TensorError(
            "shape-mismatch", f"input features {in_features} vs weight {weight.shape}, bias {bias.shape}"
        )
    return FullyConnected.apply(x, weight, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise TensorError("shape-mismatch", f"conv input {x.shape} vs weight {weight.shape}")
    kh, kw = weight.shape[2:]
    if _conv_out(x.shape[2], kh, stride, padding) < 1 or _conv_out(x.shape[3], kw, stride, padding) < 1:
        raise TensorError("shape-mismatch", f"kernel {kh}x{kw} larger than input {x.shape[2:]}")
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def maxpool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] < size or x.shape[3] < size:
        raise TensorError("shape-mismatch", f"pool {size}x{size} on input {x.shape}")
    return MaxPool2d.apply(x, size=size, stride=stride)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    if logits.data.ndim != 2:
        raise TensorError("shape-mismatch", f"logits must be 2-D, got {logits.shape}")
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _topological_order(root: Tensor) -> List[Tensor]:
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar loss. Returns gradients of every leaf that requires grad."""
    if loss.data.size != 1:
        raise TensorError("non-scalar-loss", f"loss has shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        node.grad = grad
        if node.creator is None:
            if node.requires_grad:
                leaves[node] = grad
            continue
        for parent, parent_grad in zip(node.creator.inputs, node.creator.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad
    return leaves


def glorot_uniform(shape: Tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def parameter_leaves(params: Dict[str, np.ndarray], trainable: Iterable[str]) -> Dict[str, Tensor]:
    trainable = set(trainable)
    return {name: Tensor(value, requires_grad=name in trainable, name=name) for name, value in params.items()}
