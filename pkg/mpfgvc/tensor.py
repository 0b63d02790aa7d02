"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a NumPy
``forward`` and a ``backward`` that maps the upstream gradient to one gradient
per input. Calling :meth:`Tensor.backward` on a scalar replays the recorded
graph in reverse topological order.

Precision defaults to float32; gradient checks switch to float64 with
:func:`precision`.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
import threading
from typing import Any, Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    LabelIndexError,
    NumericError,
)

_LOGGER = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype: type = np.float32
_grad_state = threading.local()
_node_ids = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype: Union[str, type]) -> None:
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unknown precision '{dtype}' (expected float32|float64)")
        dtype = _DTYPES[dtype]
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype: Union[str, type]) -> Iterator[None]:
    """Temporarily switch the default floating point precision."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs: Any) -> "Tensor":
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        record = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor._from_op(out, fn if record else None, record)


class Tensor:
    """Dense array with an optional gradient slot.

    ``grad`` holds a NumPy array of the same shape once :meth:`backward` has
    reached this tensor; tensors with ``requires_grad=False`` never get one.
    """

    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        dtype: Optional[type] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._creator: Optional[Function] = None

    @classmethod
    def _from_op(
        cls, data: np.ndarray, creator: Optional[Function], requires_grad: bool
    ) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = np.asarray(data)
        t.grad = None
        t.requires_grad = requires_grad
        t.node_id = next(_node_ids)
        t._creator = creator
        return t

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autograd ---------------------------------------------------------
    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad = self.grad + grad

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Populate ``grad`` of every requires_grad tensor reachable from self.

        Gradients accumulate additively across calls.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(
                np.asarray(grad.data if isinstance(grad, Tensor) else grad),
                self.shape,
            ).astype(self.data.dtype)
        if not self.requires_grad:
            raise ContractError("loss is not on the tape (requires_grad=False)")

        order = self._topological_order()
        pending = {id(self): seed}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            fn = node._creator
            if fn is None:
                continue
            input_grads = fn.backward(g)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for inp, ig in zip(fn.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                pending[key] = pending[key] + ig if key in pending else ig

    def _topological_order(self) -> list:
        order: list = []
        visited: set = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node._creator is not None:
                for parent in reversed(node._creator.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    # -- operators --------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(other, self)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        return SwapAxes.apply(self, axis1=axis1, axis2=axis2)

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)


class Parameter(Tensor):
    """Named learnable tensor.

    ``frozen`` parameters still take part in backward (gradients flow through
    their operations) but optimizers never change their values.
    """

    def __init__(self, data: ArrayLike, name: str = "", *, frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = bool(frozen)

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name or '?'}, shape={self.shape}, {state})"


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (
            unbroadcast(grad * self.y, self.x.shape),
            unbroadcast(grad * self.x, self.y.shape),
        )


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return unbroadcast(gx, self.x.shape), unbroadcast(gy, self.y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Sqrt(Function):
    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


_GELU_C = float(np.sqrt(2.0 / np.pi))


class Gelu(Function):
    """GELU, tanh approximation."""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


# ---------------------------------------------------------------------------
# reductions and movement
# ---------------------------------------------------------------------------


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        self.count = x.size if axis is None else x.shape[axis]
        return np.mean(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class SwapAxes(Function):
    def forward(self, x, axis1, axis2):
        self.axes = (axis1, axis2)
        return np.swapaxes(x, axis1, axis2)

    def backward(self, grad):
        return (np.swapaxes(grad, *self.axes),)


class BroadcastTo(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return np.broadcast_to(x, shape)

    def backward(self, grad):
        return (unbroadcast(grad, self.shape),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class GetItem(Function):
    def forward(self, x, index):
        self.shape, self.dtype, self.index = x.shape, x.dtype, index
        return x[index]

    def backward(self, grad):
        dx = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(dx, self.index, grad)
        return (dx,)


class GatherRows(Function):
    """Pick rows ``ids`` along the second-to-last axis, per leading index."""

    def forward(self, x, ids):
        if ids.shape[:-1] != x.shape[:-2]:
            raise DimensionError(
                f"gather ids leading shape {ids.shape[:-1]} != {x.shape[:-2]}"
            )
        n, d = x.shape[-2:]
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise ContractError(f"row index out of range [0, {n})")
        self.shape, self.dtype = x.shape, x.dtype
        x2 = x.reshape(-1, n, d)
        self.rows = np.arange(x2.shape[0])[:, None]
        self.ids = ids.reshape(x2.shape[0], -1)
        out = x2[self.rows, self.ids]
        return out.reshape(ids.shape + (d,))

    def backward(self, grad):
        n, d = self.shape[-2:]
        dx = np.zeros((self.ids.shape[0], n, d), dtype=self.dtype)
        np.add.at(dx, (self.rows, self.ids), grad.reshape(self.ids.shape + (d,)))
        return dx.reshape(self.shape), None


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, x, y):
        if x.ndim < 2 or y.ndim < 2:
            raise DimensionError(f"matmul needs >=2-D operands, got {x.shape} @ {y.shape}")
        if x.shape[-1] != y.shape[-2]:
            raise DimensionError(f"matmul inner dims differ: {x.shape} @ {y.shape}")
        self.x, self.y = x, y
        return np.matmul(x, y)

    def backward(self, grad):
        gx = np.matmul(grad, np.swapaxes(self.y, -1, -2))
        gy = np.matmul(np.swapaxes(self.x, -1, -2), grad)
        return unbroadcast(gx, self.x.shape), unbroadcast(gy, self.y.shape)


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input", {"nan": int(np.isnan(x).sum())})


class Softmax(Function):
    def forward(self, x, axis=-1):
        _check_finite(x, "softmax")
        self.axis = axis
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        _check_finite(x, "log_softmax")
        self.axis = axis
        z = x - np.max(x, axis=axis, keepdims=True)
        out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        total = np.sum(grad, axis=self.axis, keepdims=True)
        return (grad - self.softmax * total,)


class LayerNormOp(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        self.gamma, self.beta_shape = gamma, beta.shape
        return self.xhat * gamma + beta

    def backward(self, grad):
        xhat = self.xhat
        lead = tuple(range(grad.ndim - 1))
        dgamma = np.sum(grad * xhat, axis=lead)
        dbeta = np.sum(grad, axis=lead)
        g = grad * self.gamma
        dx = self.inv * (
            g
            - g.mean(axis=-1, keepdims=True)
            - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma.reshape(self.gamma.shape), dbeta.reshape(self.beta_shape)


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def layer_norm(
    x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5
) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a trailing dimension D >= 1")
    return LayerNormOp.apply(x, gamma, beta, eps=eps)


def gelu(x: ArrayLike) -> Tensor:
    return Gelu.apply(x)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def gather_rows(x: ArrayLike, ids: np.ndarray) -> Tensor:
    return GatherRows.apply(x, Tensor(np.asarray(ids), dtype=np.int64))


def cross_entropy(logits: ArrayLike, labels: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``.

    ``labels`` are class indices (shape ``[B]``) or one-hot rows (``[B, C]``).
    """
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    batch, classes = logits.shape
    if classes < 2:
        raise DimensionError(f"cross_entropy needs C >= 2, got {classes}")
    labels = np.asarray(labels)
    logp = log_softmax(logits, axis=-1)
    if labels.ndim == 2:
        if labels.shape != logits.shape:
            raise DimensionError(f"one-hot labels {labels.shape} != {logits.shape}")
        return -(logp * labels.astype(logits.dtype)).sum(axis=-1).mean()
    labels = labels.reshape(-1).astype(np.int64)
    if labels.shape[0] != batch:
        raise DimensionError(f"{labels.shape[0]} labels for batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelIndexError(f"label outside [0, {classes})")
    picked = logp[(np.arange(batch), labels)]
    return -picked.mean()


def cosine_similarity(u: ArrayLike, v: ArrayLike) -> Tensor:
    """Cosine of the angle between two D-vectors."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"cosine_similarity needs equal 1-D shapes: {u.shape}, {v.shape}")
    if not np.any(u.data) or not np.any(v.data):
        raise DegenerateInputError("cosine_similarity of a zero vector")
    return (u * v).sum() / ((u * u).sum().sqrt() * (v * v).sum().sqrt())


def finite_diff_grad(
    f: Callable[[Tensor], Union[Tensor, float]],
    x: Tensor,
    h: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> Tensor:
    """Central-difference estimate of df/dx, one coordinate at a time.

    ``coords`` restricts the probe to those flat indices; the rest stay 0.
    """

    def scalar(value: Union[Tensor, float]) -> float:
        if isinstance(value, Tensor):
            return float(value.data.reshape(-1)[0])
        return float(value)

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in (range(flat.size) if coords is None else coords):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = scalar(f(x))
            flat[i] = orig - h
            f_minus = scalar(f(x))
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad.reshape(x.shape), dtype=x.data.dtype.type)


def trunc_normal(
    rng: np.random.Generator, shape: Sequence[int], std: float = 0.02
) -> np.ndarray:
    """N(0, std²) samples truncated to ±2 std by resampling."""
    out = rng.standard_normal(tuple(shape))
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(get_default_dtype())
