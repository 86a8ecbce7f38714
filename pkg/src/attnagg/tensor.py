"""Dense float64 tensors with reverse-mode automatic differentiation.

Conventions fixed here (normative for everything built on top):

* values are C-contiguous ``numpy.float64`` arrays, row-major;
* broadcasting follows numpy's trailing-dimension rule, and gradients of
  broadcast operands are summed back to the operand shape;
* the computation graph is a tape rebuilt on every forward pass
  (define-by-run); ``backward`` walks the tape in exact reverse append
  order, which is a valid topological order by construction;
* ``Rng`` is SplitMix64, so equal seeds give bit-identical streams.

A graph and the tensors recorded on it belong to one thread. Independent
graphs on separate threads are fine; nothing is shared mutably.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input values fall outside the mathematical domain of the operation."""


class InvalidAxis(ValueError):
    """A reduction axis is out of range or repeated."""


class NotScalar(ValueError):
    """backward() requires a scalar loss tensor."""


class DetachedGraph(RuntimeError):
    """The loss tensor was not produced by the active computation graph."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (cheap evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class _Node:
    op: str
    out_id: int
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence]


class ComputationGraph:
    """Append-only operation tape; append order doubles as topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []


_active = ComputationGraph()


def active_graph() -> ComputationGraph:
    return _active


def reset_graph() -> None:
    """Drop the active tape; previously produced tensors become detached."""
    global _active
    _active = ComputationGraph()


class Tensor:
    """n-dimensional float64 value, optionally participating in the graph.

    ``values`` is always C-contiguous float64; ``grad`` is either None or an
    array of the same shape, accumulated across backward() calls.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_graph", "_producer")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._graph: ComputationGraph | None = None
        self._producer: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic operators (scalars and tensors both accepted)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def relu(self):
        return relu(self)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce_max(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def tensor_from(shape: Sequence[int], data: Iterable[float]) -> Tensor:
    """Leaf tensor from explicit shape and row-major data."""
    data = np.asarray(list(data) if not isinstance(data, np.ndarray) else data,
                      dtype=np.float64)
    n = int(np.prod(shape)) if len(shape) else 1
    if data.size != n:
        raise ShapeMismatch(f"shape {tuple(shape)} wants {n} values, got {data.size}")
    return Tensor(data.reshape(tuple(shape)))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def record_op(op: str, values: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap op output; append a tape node when recording and grads are needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input,
    aligned with ``inputs``.
    """
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    if _grad_enabled and out.requires_grad:
        out._graph = _active
        out._producer = len(_active.nodes)
        _active.nodes.append(_Node(op, out.node_id, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss over the active tape.

    Populates ``grad`` on every requires_grad leaf reached (accumulating
    across calls) and returns the full node_id -> gradient map. Seed
    gradient is 1.0.
    """
    if loss.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    g = _active
    if loss._graph is not g or loss._producer is None:
        raise DetachedGraph("loss was not produced by the active graph")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(g.nodes[: loss._producer + 1]):
        gout = grads.get(node.out_id)
        if gout is None:
            continue
        for t, gin in zip(node.inputs, node.backward_fn(gout)):
            if gin is None or not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gin
            else:
                grads[t.node_id] = gin
            if t._producer is None:  # leaf: accumulate persistent grad
                t.grad = gin.copy() if t.grad is None else t.grad + gin
    return grads


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_values(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from e
    return out_shape


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_values(a, b, "add")
    out = a.values + b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op("add", out, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_values(a, b, "sub")
    out = a.values - b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op("sub", out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_values(a, b, "mul")
    out = a.values * b.values
    av, bv = a.values, b.values

    def bwd(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return record_op("mul", out, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_values(a, b, "div")
    if np.any(b.values == 0.0):
        raise DomainError("div: zero divisor")
    out = a.values / b.values
    av, bv = a.values, b.values

    def bwd(g):
        return (_unbroadcast(g / bv, a.shape),
                _unbroadcast(-g * av / (bv * bv), b.shape))

    return record_op("div", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return record_op("neg", -a.values, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow raised as DomainError below
        out = np.exp(a.values)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow to non-finite values")

    def bwd(g):
        return (g * out,)

    return record_op("exp", out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values <= 0.0):
        raise DomainError("log: non-positive input")
    out = np.log(a.values)
    av = a.values

    def bwd(g):
        return (g / av,)

    return record_op("log", out, (a,), bwd)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    """a ** p for a python scalar exponent.

    Fractional exponents require a >= 0; negative exponents require a != 0.
    The derivative at 0 with 0 < p < 1 is unbounded; callers keep such
    inputs strictly positive.
    """
    a = _as_tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.values < 0.0):
        raise DomainError("pow_scalar: fractional power of negative base")
    if p < 0 and np.any(a.values == 0.0):
        raise DomainError("pow_scalar: negative power of zero")
    out = a.values ** p
    av = a.values

    def bwd(g):
        return (g * p * av ** (p - 1.0),) if p != 0.0 else (np.zeros_like(av),)

    return record_op("pow_scalar", out, (a,), bwd)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    # two-branch form: never exponentiates a positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = sigmoid_values(a.values)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return record_op("sigmoid", out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|)."""
    a = _as_tensor(a)
    av = a.values
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))

    def bwd(g):
        return (g * sigmoid_values(av),)

    return record_op("softplus", out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.values, 0.0)
    mask = a.values > 0  # subgradient 0 at exactly 0

    def bwd(g):
        return (g * mask,)

    return record_op("relu", out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise InvalidAxis(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def _keepdims_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def reduce_sum(a: Tensor, axes=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(a.shape, axes)
    in_shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g.reshape(kshape), in_shape).copy(),)

    return record_op("sum", out, (a,), bwd)


def reduce_mean(a: Tensor, axes=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.values.mean(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(a.shape, axes)
    in_shape = a.shape
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def bwd(g):
        return (np.broadcast_to(g.reshape(kshape) / count, in_shape).copy(),)

    return record_op("mean", out, (a,), bwd)


def reduce_max(a: Tensor, axes=None, keepdims=False) -> Tensor:
    """Max over axes; the gradient routes to the first maximal element
    (row-major order) of each reduced block."""
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.values.max(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(a.shape, axes)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    perm = kept + axes
    av = a.values

    def bwd(g):
        moved = av.transpose(perm)
        lead = moved.shape[: len(kept)]
        flat = moved.reshape(int(np.prod(lead)) if lead else 1, -1)
        arg = flat.argmax(axis=1)  # first occurrence on ties
        gmask = np.zeros_like(flat)
        gmask[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        inv = np.argsort(perm)
        return (gmask.reshape(moved.shape).transpose(inv).copy(),)

    return record_op("max", out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul wants 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape} x {b.shape}")
    out = a.values @ b.values
    av, bv = a.values, b.values

    def bwd(g):
        return g @ bv.T, av.T @ g

    return record_op("matmul", out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose wants a 2-d tensor, got {a.shape}")
    return record_op("transpose", a.values.T.copy(), (a,), lambda g: (g.T.copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}")
    in_shape = a.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return record_op("reshape", a.values.reshape(shape).copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# deterministic RNG

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed (per-sample / per-epoch substreams)."""
    s = _mix64(seed & _MASK64)
    for k in keys:
        s = _mix64(((s ^ (k & _MASK64)) + _GOLDEN) & _MASK64)
    return s


class Rng:
    """SplitMix64 generator.

    state advances by the 64-bit golden gamma each draw and the output is the
    standard SplitMix64 finalizer, so the stream for a given seed is
    bit-identical everywhere. Doubles take the top 53 bits: (z >> 11) * 2^-53.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return _mix64(self.state)

    def next_float(self) -> float:
        """Uniform in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def u64_array(self, n: int) -> np.ndarray:
        """Vectorized: identical to n successive next_u64() calls."""
        base = np.uint64(self.state)
        steps = (np.arange(1, n + 1, dtype=np.uint64)) * np.uint64(_GOLDEN)
        z = base + steps  # wraps mod 2^64
        self.state = (self.state + n * _GOLDEN) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def float_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)) * 2.0 ** -53

    def uniform(self, lo: float, hi: float, n: int | None = None):
        if n is None:
            return lo + (hi - lo) * self.next_float()
        return lo + (hi - lo) * self.float_array(n)

    def below(self, n: int) -> int:
        """Integer in [0, n) via modulo (bias negligible for desk-scale n)."""
        return self.next_u64() % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def child(self, index: int) -> "Rng":
        """Independent substream keyed by index; depends on seed only."""
        return Rng(derive_seed(self.seed, index))


# ---------------------------------------------------------------------------
# flat-file dump/load (17 significant digits round-trips float64 exactly)


def dump_tensor(path, values) -> None:
    """Write ``shape: d0 d1 ...`` then one value per line, row-major."""
    a = np.ascontiguousarray(values.values if isinstance(values, Tensor) else values,
                             dtype=np.float64)
    lines = ["shape: " + " ".join(str(d) for d in a.shape)]
    lines.extend(format(v, ".17g") for v in a.ravel())
    Path(path).write_text("\n".join(lines) + "\n")


def load_tensor(path) -> np.ndarray:
    text = Path(path).read_text()
    head, _, body = text.partition("\n")
    if not head.startswith("shape:"):
        raise ValueError(f"{path}: missing shape header")
    shape = tuple(int(t) for t in head.split()[1:])
    vals = np.array(body.split(), dtype=np.float64)
    n = int(np.prod(shape)) if shape else 1
    if vals.size != n:
        raise ShapeMismatch(f"{path}: shape {shape} wants {n} values, got {vals.size}")
    return vals.reshape(shape)
