"""
Dense float64 tensors with a reverse-mode differentiation tape.

A Tensor wraps a numpy array. When a Tape is active on the current thread and
any input requires a gradient, each operation appends a node (parents plus a
closure mapping the output gradient to input gradients) to that tape. Nodes are
appended in creation order, so the tape is already topologically sorted and
backward() only has to walk it in reverse.

Usage:
    with Tape() as tape:
        loss = (x * x).sum()
    grads = backward(loss, wrt=[x])
"""
from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-12
DIV_EPS = 1e-12

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
Axis = Union[None, int, Tuple[int, ...]]


class TensorError(ValueError):
    """Base class for tensor engine errors."""


class ShapeError(TensorError):
    """Raised when operand shapes are incompatible."""


class DivisionByZeroError(TensorError, ZeroDivisionError):
    """Raised when a divisor entry is within DIV_EPS of zero."""


class BackwardError(TensorError):
    """Raised when backward() is called on a non-scalar or detached loss."""


_local = threading.local()
_tape_ids = itertools.count(1)


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the innermost tape entered on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: "Tensor"
    parents: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
    op: str


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    A tape is confined to the thread that entered it. Independent forward
    passes (one per shape pair) each get their own tape and may run
    concurrently.

    Args:
        kink_tol: when positive, max-reductions whose top-two gap and
            leaky_relu inputs whose magnitude fall below this value mark the
            tape as `near_kink` (used by grad_check to skip such points).
    """

    def __init__(self, kink_tol: float = 0.0):
        self.id = next(_tape_ids)
        self.nodes: List[_Node] = []
        self.kink_tol = float(kink_tol)
        self.near_kink = False
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: Tuple["Tensor", ...], backward_fn, op: str) -> None:
        if self.consumed:
            raise BackwardError("Tape was already consumed by backward().")
        out._tape = self
        out.tape_id = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward_fn, op))

    def flag_kink(self) -> None:
        self.near_kink = True


class Tensor:
    """Immutable n-dimensional float64 array that can take part in a Tape."""

    __array_priority__ = 1000  # make numpy defer to Tensor's reflected operators

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        # read-only view; the caller's array keeps its own flags
        arr = np.asarray(data, dtype=np.float64).view()
        arr.setflags(write=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.tape_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.grad: Optional[np.ndarray] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p: float): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, key): return index(self, key)

    def sum(self, axis: Axis = None, keepdims: bool = False): return reduce("sum", self, axis, keepdims)
    def mean(self, axis: Axis = None, keepdims: bool = False): return reduce("mean", self, axis, keepdims)
    def max(self, axis: Optional[int] = None, keepdims: bool = False): return reduce("max", self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def exp(self): return exp(self)
    def sigmoid(self): return sigmoid(self)
    def leaky_relu(self, slope: float = LEAKY_SLOPE): return leaky_relu(self, slope)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


TensorLike = Union[Tensor, ArrayLike]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.record(out, parents, backward_fn, op)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out dimensions that broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# -- elementwise ----------------------------------------------------------
def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(np.abs(b.data) < DIV_EPS):
        raise DivisionByZeroError(f"div: divisor has entries with |x| < {DIV_EPS}")
    out = a.data / b.data

    def _backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), _backward, "div")


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: TensorLike, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def sqrt(a: TensorLike) -> Tensor:
    return power(a, 0.5)


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(a: TensorLike, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    x = a.data
    tape = active_tape()
    if tape is not None and tape.kink_tol > 0 and a.requires_grad and np.any(np.abs(x) < tape.kink_tol):
        tape.flag_kink()
    factor = np.where(x > 0, 1.0, slope)
    return _make(x * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def elementwise(op: str, *operands: TensorLike, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name (add, sub, mul, div, exp, sigmoid, leaky_relu)."""
    table = {"add": add, "sub": sub, "mul": mul, "div": div, "exp": exp,
             "sigmoid": sigmoid, "leaky_relu": leaky_relu, "neg": neg}
    if op not in table:
        raise TensorError(f"Unknown elementwise op: {op!r}")
    return table[op](*operands, **kwargs)


# -- linear algebra -------------------------------------------------------
def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dimensions.

    Raises:
        ShapeError: if either operand is not at least 2-D or inner dims differ
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}")

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), _backward, "matmul")


def cross3(a: TensorLike, b: TensorLike) -> Tensor:
    """Cross product along the last axis (which must have extent 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross3 needs a trailing axis of 3, got {a.shape} and {b.shape}")
    _broadcast_shape(a, b, "cross3")
    out = np.cross(a.data, b.data)

    def _backward(g):
        return (unbroadcast(np.cross(b.data, g), a.shape),
                unbroadcast(np.cross(g, a.data), b.shape))

    return _make(out, (a, b), _backward, "cross3")


def l2_norm(a: TensorLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along an axis; the gradient at the zero vector is zero."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    out = norm if keepdims else np.squeeze(norm, axis=axis)

    def _backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * a.data / (norm + NORM_EPS),)

    return _make(out, (a,), _backward, "l2_norm")


def row_l2_norm(a: TensorLike) -> Tensor:
    """Per-row Euclidean norm of an r x 3 tensor."""
    a = as_tensor(a)
    if a.shape[-1] != 3:
        raise ShapeError(f"row_l2_norm expects a last dimension of 3, got {a.shape}")
    return l2_norm(a, axis=-1)


# -- reductions -----------------------------------------------------------
def _normalize_axis(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is out of range for a {ndim}-D tensor")
        norm.append(ax % ndim)
    return tuple(sorted(norm))


def reduce(op: str, t: TensorLike, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Reduce along `axis` with op in {sum, mean, max}.

    The max backward routes the whole gradient to the first maximal entry.

    Raises:
        ShapeError: if the reduced extent is empty or the axis is invalid
    """
    t = as_tensor(t)
    axes = _normalize_axis(axis, t.ndim)
    if any(t.shape[ax] == 0 for ax in axes) or t.size == 0:
        raise ShapeError(f"reduce({op}) over an empty axis of shape {t.shape}")
    count = int(np.prod([t.shape[ax] for ax in axes])) if axes else 1

    if op == "sum" or op == "mean":
        scale = 1.0 if op == "sum" else 1.0 / count
        out = np.sum(t.data, axis=axes, keepdims=keepdims) * scale

        def _backward(g):
            g = g if keepdims else np.expand_dims(g, axes)
            return (np.broadcast_to(g * scale, t.shape).copy(),)

        return _make(out, (t,), _backward, op)

    if op == "max":
        if axis is None:
            flat = reshape(t, (-1,))
            res = reduce("max", flat, 0, False)
            return reshape(res, (1,) * t.ndim) if keepdims else res
        if len(axes) != 1:
            raise ShapeError("reduce(max) supports a single axis")
        ax = axes[0]
        idx = np.argmax(t.data, axis=ax)
        idx_k = np.expand_dims(idx, ax)
        out_k = np.take_along_axis(t.data, idx_k, axis=ax)
        tape = active_tape()
        if tape is not None and tape.kink_tol > 0 and t.requires_grad and t.shape[ax] > 1:
            part = -np.partition(-t.data, 1, axis=ax)
            gap = np.take(part, 0, axis=ax) - np.take(part, 1, axis=ax)
            if np.any(gap < tape.kink_tol):
                tape.flag_kink()

        def _backward(g):
            g = g if keepdims else np.expand_dims(g, ax)
            grad = np.zeros_like(t.data)
            np.put_along_axis(grad, idx_k, g, axis=ax)
            return (grad,)

        out = out_k if keepdims else np.squeeze(out_k, axis=ax)
        return _make(out, (t,), _backward, "max")

    raise TensorError(f"Unknown reduction: {op!r}")


def softmax(logits: TensorLike, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    t = as_tensor(logits)
    shifted = t.data - np.max(t.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (t,), _backward, "softmax")


# -- structural -----------------------------------------------------------
def reshape(t: TensorLike, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    try:
        out = t.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}")
    return _make(out, (t,), lambda g: (g.reshape(t.shape),), "reshape")


def transpose(t: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    t = as_tensor(t)
    axes = tuple(reversed(range(t.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(t: TensorLike, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    try:
        out = np.broadcast_to(t.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {t.shape} to {tuple(shape)}")
    return _make(out, (t,), lambda g: (unbroadcast(g, t.shape),), "broadcast_to")


def expand_dims(t: TensorLike, axis: int) -> Tensor:
    t = as_tensor(t)
    return reshape(t, np.expand_dims(t.data, axis).shape)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis; backward splits the gradient."""
    parts = tuple(as_tensor(x) for x in tensors)
    if not parts:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, parts, _backward, "concat")


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [expand_dims(as_tensor(x), axis) for x in tensors]
    return concat(parts, axis=axis)


def index(t: TensorLike, key) -> Tensor:
    """Basic or advanced indexing; backward scatters additively (np.add.at).

    Raises:
        ShapeError: on out-of-bounds indices
    """
    t = as_tensor(t)
    try:
        out = t.data[key]
    except IndexError as exc:
        raise ShapeError(f"index out of bounds: {exc}")

    def _backward(g):
        grad = np.zeros_like(t.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _make(np.array(out, dtype=np.float64), (t,), _backward, "index")


def gather(t: TensorLike, indices, axis: int = 0) -> Tensor:
    """Select entries of `t` along `axis` by an integer index array of any shape."""
    t = as_tensor(t)
    indices = np.asarray(indices, dtype=np.intp)
    extent = t.shape[axis]
    if indices.size and (indices.min() < -extent or indices.max() >= extent):
        raise ShapeError(f"gather index out of bounds for axis of size {extent}")
    key = (slice(None),) * (axis % t.ndim) + (indices,)
    return index(t, key)


def slice_(t: TensorLike, start: int, stop: int, axis: int = 0) -> Tensor:
    t = as_tensor(t)
    key = (slice(None),) * (axis % t.ndim) + (slice(start, stop),)
    return index(t, key)


# -- differentiation ------------------------------------------------------
def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Back-propagate a scalar loss through its tape.

    Args:
        loss: scalar tensor recorded on a tape
        wrt: optional leaves that must appear in the result; leaves the loss
            does not reach receive zero gradients

    Returns:
        Dict mapping every requires_grad leaf reached (and every `wrt` entry)
        to dLoss/dLeaf. Each leaf's `.grad` is set as well.

    Raises:
        BackwardError: if the loss is not scalar, is detached, or its tape was
            already consumed
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise BackwardError(f"backward() needs a scalar loss, got {shape}")
    tape = loss._tape
    if tape is None or loss.tape_id is None:
        raise BackwardError("Loss is detached: it was not computed on an active tape.")
    if tape.consumed:
        raise BackwardError("Tape was already consumed by backward().")

    node_grads: Dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    leaf_grads: Dict[int, np.ndarray] = {}
    leaves: Dict[int, Tensor] = {}

    for pos in range(loss.tape_id, -1, -1):
        g = node_grads.pop(pos, None)
        if g is None:
            continue
        node = tape.nodes[pos]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._tape is tape and parent.tape_id is not None:
                prev = node_grads.get(parent.tape_id)
                node_grads[parent.tape_id] = pg if prev is None else prev + pg
            else:
                key = id(parent)
                leaves[key] = parent
                prev = leaf_grads.get(key)
                leaf_grads[key] = pg if prev is None else prev + pg

    tape.consumed = True
    tape.nodes.clear()

    result: Dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        grad = np.asarray(leaf_grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = grad
        result[leaf] = grad
    for leaf in wrt or ():
        if leaf not in result:
            grad = np.zeros_like(leaf.data)
            leaf.grad = grad
            result[leaf] = grad
    return result


@dataclass
class GradCheckReport:
    """Outcome of comparing backward() against central differences."""

    max_rel_err: float
    skipped: bool = False
    reason: str = ""
    coords_checked: int = 0
    per_input: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.skipped or self.max_rel_err <= 1e-4


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[ArrayLike],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    kink_tol: Optional[float] = None,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar function with central differences.

    The error is normwise: max|analytic - numeric| / max(max|analytic|, max|numeric|)
    per input, then the maximum over inputs. When the evaluation passes within
    `kink_tol` (default 10*h) of a max tie or a leaky_relu kink the check is
    reported as skipped rather than failed.

    Args:
        f: function of Tensors returning a scalar Tensor
        inputs: arrays for the positional arguments of f
        h: finite-difference step
        max_coords: if set, check at most this many randomly chosen
            coordinates per input
        seed: seed for the coordinate subsample
        kink_tol: distance to a non-differentiable point that triggers a skip
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    kink_tol = 10.0 * h if kink_tol is None else kink_tol
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape(kink_tol=kink_tol) as tape:
        out = f(*leaves)
    if tape.near_kink:
        return GradCheckReport(float("nan"), skipped=True, reason="input near a non-differentiable point")
    grads = backward(out, wrt=leaves)

    def evaluate(values: List[np.ndarray]) -> float:
        return as_tensor(f(*[Tensor(v) for v in values])).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    per_input = []
    checked = 0
    for pos, base in enumerate(arrays):
        analytic = grads[leaves[pos]].ravel()
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        numeric = np.zeros(len(coords))
        for slot, c in enumerate(coords):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[pos].ravel()[c] += h
            minus[pos].ravel()[c] -= h
            numeric[slot] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        picked = analytic[coords]
        scale = max(np.max(np.abs(picked), initial=0.0), np.max(np.abs(numeric), initial=0.0))
        err = 0.0 if scale < 1e-12 else float(np.max(np.abs(picked - numeric)) / scale)
        per_input.append(err)
        worst = max(worst, err)
        checked += len(coords)
    return GradCheckReport(worst, coords_checked=checked, per_input=per_input)
