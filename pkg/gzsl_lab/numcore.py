"""
Numerical Core
==============
Double-precision tensors and tape-based reverse-mode differentiation over the
operation set used by the attention modules, the head and the losses.

Ops record onto the Tape active in the current context (``with tape:``).
Without an active tape they run detached, which is the inference path.
"""

import contextvars
import math
from dataclasses import dataclass
from collections.abc import Mapping
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import ContractError, ShapeError

DTYPE = np.float64
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_active_tape: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """Dense real-valued array that may participate in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable leaf; its shape is fixed at construction."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)

    def assign(self, values) -> None:
        """Overwrite the values in place, keeping the shape."""
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != self.data.shape:
            raise ShapeError(f"assign to {self.name or 'parameter'}", self.data.shape, values.shape)
        self.data[...] = values


def _wrap(array: np.ndarray) -> Tensor:
    """Detached tensor around an existing array without copying."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(array, dtype=DTYPE)
    out.requires_grad = False
    out.node_id = None
    out.tape = None
    out.name = None
    return out


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return _wrap(np.array(value, dtype=DTYPE))


@dataclass
class TapeNode:
    """One recorded operation."""

    node_id: int
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradientMap(Mapping):
    """Gradients of every requires_grad leaf reached by a backward pass.

    Indexed by parameter name; ``for_tensor`` looks up any leaf and returns
    None for tensors the pass never reached (detached or unused).
    """

    def __init__(self, leaves: List[Tensor], grads: Dict[int, np.ndarray]):
        self._by_id = {id(t): grads[id(t)] for t in leaves if id(t) in grads}
        self._by_name = {t.name: grads[id(t)] for t in leaves if t.name and id(t) in grads}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._by_name[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._by_name)

    def __len__(self) -> int:
        return len(self._by_name)

    def for_tensor(self, tensor: Tensor) -> Optional[np.ndarray]:
        return self._by_id.get(id(tensor))


class Tape:
    """Append-only record of operations; single owner, not thread-shared."""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
        out = _wrap(out_data)
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append(TapeNode(out.node_id, op, inputs, out, backward))
        return out

    def backward(self, loss: Tensor) -> GradientMap:
        """Reverse pass from a scalar loss; visits each node once, newest first."""
        if loss.data.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss was not recorded on this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
        leaves: List[Tensor] = []
        seen_leaves = set()

        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.tape is not self and key not in seen_leaves:
                    seen_leaves.add(key)
                    leaves.append(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

        return GradientMap(leaves, grads)


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    return tape.backward(loss)


def current_tape() -> Optional[Tape]:
    return _active_tape.get()


def _apply(op: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        return tape.record(op, inputs, out_data, backward)
    return _wrap(out_data)


# =============================================================================
# ELEMENTWISE ARITHMETIC
# =============================================================================

def _check_broadcast(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    # Equal shapes, scalar against anything, or a row vector against a matrix.
    if a == b or a == () or b == ():
        return
    if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
        return
    if len(b) == 2 and len(a) == 1 and b[1] == a[0]:
        return
    raise ShapeError(op, a, b)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply("add", (a, b), a.data + b.data, backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply("sub", (a, b), a.data - b.data, backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply("mul", (a, b), a.data * b.data, backward)


def scale_rows(x: Tensor, v: Tensor) -> Tensor:
    """Multiply row i of x[n×d] by v[i]."""
    x, v = as_tensor(x), as_tensor(v)
    if x.ndim != 2 or v.shape != (x.shape[0],):
        raise ShapeError("scale_rows", x.shape, v.shape)

    def backward(g):
        return g * v.data[:, None], (g * x.data).sum(axis=1)

    return _apply("scale_rows", (x, v), x.data * v.data[:, None], backward)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (2.0 * x.data * g,)

    return _apply("square", (x,), x.data * x.data, backward)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("add_n", shape, t.shape)
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data

    def backward(g):
        return tuple(g for _ in tensors)

    return _apply("add_n", tensors, out, backward)


# =============================================================================
# SHAPE AND REDUCTION
# =============================================================================

def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape)

    def backward(g):
        return (g.T,)

    return _apply("transpose", (x,), x.data.T.copy(), backward)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.full(x.shape, g, dtype=DTYPE),)

    return _apply("sum", (x,), np.asarray(x.data.sum(), dtype=DTYPE), backward)


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size
    if n == 0:
        raise ContractError("mean of an empty tensor")

    def backward(g):
        return (np.full(x.shape, g / n, dtype=DTYPE),)

    return _apply("mean", (x,), np.asarray(x.data.sum() / n, dtype=DTYPE), backward)


def select(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather entries of a vector."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeError("select", x.shape)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        dx = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(dx, idx, g)
        return (dx,)

    return _apply("select", (x,), x.data[idx].copy(), backward)


def pick(x: Tensor, index: int) -> Tensor:
    """Single entry of a vector as a scalar tensor."""
    x = as_tensor(x)
    if x.ndim != 1 or not 0 <= index < x.shape[0]:
        raise ShapeError("pick", x.shape, (index,))

    def backward(g):
        dx = np.zeros(x.shape, dtype=DTYPE)
        dx[index] = g
        return (dx,)

    return _apply("pick", (x,), np.asarray(x.data[index], dtype=DTYPE), backward)


def gmp(x: Tensor, axis: int) -> Tensor:
    """Global max pooling of a matrix along one axis.

    The gradient goes to the first maximal element (lowest index) only.
    """
    x = as_tensor(x)
    if x.ndim != 2 or axis not in (0, 1) or x.shape[axis] == 0:
        raise ShapeError(f"gmp(axis={axis})", x.shape)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        dx = np.zeros(x.shape, dtype=DTYPE)
        if axis == 1:
            dx[np.arange(x.shape[0]), idx] = g
        else:
            dx[idx, np.arange(x.shape[1])] = g
        return (dx,)

    return _apply("gmp", (x,), out, backward)


# =============================================================================
# LINEAR ALGEBRA
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a[m×k] (or a vector a[k]) with b[k×n]."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        if a.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        return b.data @ g, np.outer(a.data, g)

    return _apply("matmul", (a, b), a.data @ b.data, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization with biased variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)

    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _apply("layer_norm", (x, gamma, beta), out, backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("softmax_rows", x.shape)
    z = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _apply("softmax_rows", (x,), p, backward)


def logsumexp(x: Tensor) -> Tensor:
    """Stable log-sum-exp of a vector, as a scalar."""
    x = as_tensor(x)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError("logsumexp", x.shape)
    m = x.data.max()
    z = np.exp(x.data - m)
    total = z.sum()
    out = np.asarray(m + np.log(total), dtype=DTYPE)

    def backward(g):
        return (g * z / total,)

    return _apply("logsumexp", (x,), out, backward)


def cosine_similarity(pred: Tensor, prototypes: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Cosine of pred[k] against each row of prototypes[C×k].

    Entries involving a zero-norm vector are 0 with zero gradient; the
    returned boolean mask marks them.
    """
    pred, prototypes = as_tensor(pred), as_tensor(prototypes)
    if pred.ndim != 1 or prototypes.ndim != 2 or prototypes.shape[1] != pred.shape[0]:
        raise ShapeError("cosine_similarity", pred.shape, prototypes.shape)

    p_norm = float(np.sqrt(pred.data @ pred.data))
    a_norm = np.sqrt((prototypes.data * prototypes.data).sum(axis=1))
    degenerate = (a_norm == 0.0) | (p_norm == 0.0)
    denom = np.where(degenerate, 1.0, p_norm * a_norm)
    cos = np.where(degenerate, 0.0, (prototypes.data @ pred.data) / denom)

    def backward(g):
        w = np.where(degenerate, 0.0, g)
        safe_p = p_norm if p_norm > 0 else 1.0
        safe_a = np.where(a_norm == 0.0, 1.0, a_norm)
        d_pred = (w / denom) @ prototypes.data - (w * cos).sum() * pred.data / (safe_p * safe_p)
        d_proto = (
            np.outer(w / denom, pred.data)
            - (w * cos / (safe_a * safe_a))[:, None] * prototypes.data
        )
        return d_pred, d_proto

    return _apply("cosine_similarity", (pred, prototypes), cos, backward), degenerate


# =============================================================================
# ACTIVATIONS
# =============================================================================

def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with the Gaussian CDF."""
    x = as_tensor(x)
    cdf = special.ndtr(x.data)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _apply("gelu", (x,), x.data * cdf, backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = special.expit(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _apply("sigmoid", (x,), s, backward)
