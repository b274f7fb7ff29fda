"""
Tensor Arithmetic with Reverse-Mode Differentiation

This module provides the numeric substrate of the package:
- Tensor: a float64 numpy array plus an optional handle into a Graph
- Graph: a define-by-run tape of operation records, rebuilt per forward pass
- Differentiable operations (elementwise, matmul, reductions, softmax, ...)
- backward(): reverse sweep returning a name -> gradient map

Operations only record into the innermost active Graph and only when at least
one input requires a gradient. Outside a Graph (or inside no_grad()) they are
plain numpy computations.

Usage:
    with Graph() as tape:
        loss = (w * w).sum() / 2
    grads = tape.backward(loss, {"w": w})
"""

import itertools
import logging
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
Vjp = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_uids = itertools.count()
# Stack of active graphs; a None entry suspends recording (no_grad)
_graph_stack: List[Optional["Graph"]] = []


class Tensor:
    """
    n-dimensional float64 array that can participate in a Graph.

    Attributes:
        data: numpy float64 array holding the elements (row-major)
        name: Optional parameter name, used as the key in gradient maps
        requires_grad: Whether gradients flow into this tensor
        node: Index of the record that produced this tensor in its graph, or None
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, name: Optional[str] = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self.requires_grad = requires_grad
        self.node: Optional[int] = None
        self.graph: Optional["Graph"] = None
        self.uid = next(_uids)

    # ----- introspection -----

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
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Return a graph-free tensor sharing the same values."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # ----- operators -----

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # ----- method forms -----

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


class _Record(NamedTuple):
    out_uid: int
    inputs: Tuple[Tensor, ...]
    vjp: Vjp


class Graph:
    """
    Define-by-run differentiation tape.

    Records are appended in construction order, so the tape is acyclic and a
    reverse sweep visits every record exactly once.
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], vjp: Vjp) -> int:
        self.records.append(_Record(out.uid, inputs, vjp))
        out.graph = self
        return len(self.records) - 1

    def backward(
        self,
        loss: Tensor,
        wrt: Optional[Union[Mapping[str, Tensor], Iterable[Tensor]]] = None,
    ) -> Dict[str, Tensor]:
        """
        Reverse sweep from a scalar loss.

        Args:
            loss: Scalar tensor produced inside this graph
            wrt: Leaves to report, as a name -> Tensor mapping or an iterable of
                 named tensors. None reports every named leaf reachable from loss.

        Returns:
            Dictionary mapping leaf name to its gradient. Leaves that do not
            influence the loss get a zero gradient of their own shape.

        Raises:
            GraphError: If loss is not a scalar or was not recorded in this graph
        """
        if loss.data.ndim != 0:
            raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.graph is not self or loss.node is None:
            raise GraphError("backward() called on a tensor that is not part of this graph")

        grads: Dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}

        for record in reversed(self.records[: loss.node + 1]):
            g = grads.pop(record.out_uid, None)
            if g is None:
                continue
            for inp, gi in zip(record.inputs, record.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    leaves[inp.uid] = inp
                prev = grads.get(inp.uid)
                grads[inp.uid] = gi if prev is None else prev + gi

        if wrt is None:
            targets = {t.name: t for t in leaves.values() if t.name is not None}
        elif isinstance(wrt, Mapping):
            targets = dict(wrt)
        else:
            targets = {t.name: t for t in wrt}

        result = {}
        for name, tensor in targets.items():
            g = grads.get(tensor.uid)
            result[name] = Tensor(np.zeros_like(tensor.data) if g is None else np.array(g))
        return result


class no_grad:
    """Context manager that suspends recording into the active graph."""

    def __enter__(self):
        _graph_stack.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack.pop()
        return False


def current_graph() -> Optional[Graph]:
    return _graph_stack[-1] if _graph_stack else None


def backward(loss: Tensor, wrt=None) -> Dict[str, Tensor]:
    """Run the reverse sweep on the graph that recorded loss."""
    if loss.graph is None:
        raise GraphError("backward() called on a tensor outside any graph")
    return loss.graph.backward(loss, wrt)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike, name: str) -> Tensor:
    """Create a named leaf that receives gradients."""
    return Tensor(np.array(data, dtype=np.float64), name=name, requires_grad=True)


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    out = Tensor(data)
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = graph.record(out, inputs, vjp)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(x: np.ndarray, op: str):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{op}: non-finite input")


# ===== ELEMENTWISE =====


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    return _result(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
    )


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-softplus(-x)) stays finite and accurate in both tails
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _result(out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ===== LINEAR ALGEBRA AND SHAPE =====


def matmul(a, b) -> Tensor:
    """
    Matrix product over the last two axes (leading axes broadcast).

    Raises:
        ShapeError: If the inner extents disagree
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), vjp)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) / float(max(count, 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    """Differentiable indexing (basic slices and integer arrays)."""
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


# ===== NORMALIZATIONS =====


def softmax_rows(x, axis: int = -1) -> Tensor:
    """
    Softmax along the last axis (each row of a matrix sums to 1).

    Stabilized by subtracting the row maximum before exponentiation.

    Raises:
        NonFiniteError: If the input holds NaN or inf
    """
    x = as_tensor(x)
    _check_finite(x.data, "softmax_rows")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    norm = sqrt(tsum(x * x, axis=-1, keepdims=True) + eps)
    return x / norm


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """
    Mean cross-entropy of integer targets under row-wise softmax.

    Args:
        logits: Tensor[n x c]
        targets: Integer array of n class indices

    Returns:
        Scalar tensor; zero for n = 0
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        return Tensor(0.0)
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(targets.size), targets))
    return -mean(picked)
