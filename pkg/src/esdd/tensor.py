"""Small dense-tensor library with a reverse-mode tape.

Only the operations needed by the MHFA back-end are provided.  Tensors wrap
NumPy arrays and are treated as immutable; every differentiable operation
records its parents and a backward closure on the output tensor.  Nodes get
a monotonically increasing id at construction, so the backward pass simply
visits the reachable nodes in reverse construction order.

Broadcasting is deliberately restricted to leading axes: for a binary op the
shape of one operand must be a suffix of the other.  Anything else raises
:class:`ShapeError`.  Use :func:`expand` to broadcast explicitly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradientError",
    "Gradients",
    "GradCheckResult",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "std",
    "concat",
    "reshape",
    "transpose",
    "expand",
    "weighted_sum",
    "nll",
    "backward",
    "grad_check",
]

_node_ids = itertools.count()

STD_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GradientError(RuntimeError):
    """Backward pass called on something that is not a scalar loss."""


class Tensor:
    """Immutable array node in a differentiation graph.

    Parameters
    ----------
    data : array_like
        Values.  Floating arrays keep their dtype; anything else is
        converted to float64.
    requires_grad : bool
        Mark the tensor as a trainable leaf.
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "_id")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        arr = arr.view()
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def assert_finite(self, name: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise FloatingPointError(f"{name} ({self.op}) holds {bad} non-finite values")
        return self

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    tracked = tuple(parents)
    needs = any(p.requires_grad for p in tracked)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tracked, _backward=backward_fn, op=op)


def _cast(g: np.ndarray, like: Tensor) -> np.ndarray:
    return g.astype(like.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    long_, short = (a, b) if len(a) >= len(b) else (b, a)
    if len(short) == 0 or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast over leading axes")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.ndim > len(shape):
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")

    def bw(g):
        return _cast(_unbroadcast(g, a.shape), a), _cast(_unbroadcast(g, b.shape), b)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "sub")

    def bw(g):
        return _cast(_unbroadcast(g, a.shape), a), _cast(-_unbroadcast(g, b.shape), b)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return (None if ga is None else _cast(ga, a)), (None if gb is None else _cast(gb, b))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return (None if ga is None else _cast(ga, a)), (None if gb is None else _cast(gb, b))

    return _make(out, (a, b), bw, "div")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def bw(g):
        return (_cast(g * c, x),)

    return _make((x.data * c).astype(x.dtype, copy=False), (x,), bw, "scale")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either operand may be a plain matrix shared across the other's leading
    (batch) axes; otherwise leading axes must match exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise ShapeError(f"matmul: batch axes differ for shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if lead_a or not lead_b:
                ga = g @ np.swapaxes(b.data, -1, -2)
            else:
                ga = (g @ np.swapaxes(b.data, -1, -2)).sum(axis=tuple(range(len(lead_b))))
            ga = _cast(ga, a)
        if b.requires_grad:
            if lead_b:
                gb = np.swapaxes(a.data, -1, -2) @ g
            elif lead_a:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = a.data.T @ g
            gb = _cast(gb, b)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def weighted_sum(x, w, axis: int) -> Tensor:
    """Contract ``x`` with the vector ``w`` along ``axis``."""
    x, w = as_tensor(x), as_tensor(w)
    axis = axis % x.ndim
    if w.ndim != 1 or w.shape[0] != x.shape[axis]:
        raise ShapeError(
            f"weighted_sum: weights of shape {w.shape} do not match axis {axis} of {x.shape}"
        )
    moved = np.moveaxis(x.data, axis, 0)
    n = w.shape[0]
    out = np.tensordot(w.data, moved, axes=(0, 0))

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.moveaxis(w.data.reshape((n,) + (1,) * g.ndim) * g[None], 0, axis)
            gx = _cast(gx, x)
        if w.requires_grad:
            gw = _cast(moved.reshape(n, -1) @ g.reshape(-1), w)
        return gx, gw

    return _make(out, (x, w), bw, "weighted_sum")


# ---------------------------------------------------------------------------
# normalisations
# ---------------------------------------------------------------------------


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    s = _softmax_np(x.data, axis)

    def bw(g):
        return (_cast(s * (g - (g * s).sum(axis=axis, keepdims=True)), x),)

    return _make(s, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (_cast(g - np.exp(out) * g.sum(axis=axis, keepdims=True), x),)

    return _make(out, (x,), bw, "log_softmax")


def nll(logp, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logp`` (B x C)."""
    logp = as_tensor(logp)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logp.ndim != 2 or logp.shape[0] != labels.shape[0]:
        raise ShapeError(f"nll: log-probs {logp.shape} vs {labels.shape[0]} labels")
    n = labels.shape[0]
    rows = np.arange(n)
    out = -logp.data[rows, labels].mean()

    def bw(g):
        gl = np.zeros_like(logp.data)
        gl[rows, labels] = -float(g) / n
        return (gl,)

    return _make(np.asarray(out, dtype=logp.dtype), (logp,), bw, "nll")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (_cast(np.broadcast_to(g, x.shape).copy(), x),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (_cast(np.broadcast_to(g / n, x.shape).copy(), x),)

    return _make(np.asarray(out), (x,), bw, "mean")


def std(x, axis: int, keepdims: bool = False, eps: float = STD_EPS) -> Tensor:
    """Population standard deviation with ``eps`` added under the square root."""
    x = as_tensor(x)
    n = x.shape[axis]
    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    s = np.sqrt((centered**2).mean(axis=axis, keepdims=True) + eps)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (_cast(g * centered / (n * s), x),)

    out = s if keepdims else np.squeeze(s, axis=axis)
    return _make(out, (x,), bw, "std")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or np.delete(t.shape, axis).tolist() != np.delete(ref, axis).tolist():
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(_cast(piece, t) for piece, t in zip(np.split(g, cuts, axis=axis), ts))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(tuple(shape))

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw, "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def expand(x, axis: int, n: int) -> Tensor:
    """Insert a new axis of extent ``n`` at ``axis`` by repetition."""
    x = as_tensor(x)
    shape = list(x.shape)
    axis = axis % (x.ndim + 1)
    shape.insert(axis, n)
    out = np.broadcast_to(np.expand_dims(x.data, axis), shape)

    def bw(g):
        return (_cast(g.sum(axis=axis), x),)

    return _make(out, (x,), bw, "expand")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


class Gradients(dict):
    """Mapping from leaf tensor to its gradient array."""

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> Gradients:
    """Gradients of a scalar ``loss`` with respect to every reachable leaf.

    Nothing is stored on the tensors, so repeated calls on one graph give
    identical results.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise GradientError(f"backward needs a scalar loss, got shape {shape}")
    result = Gradients()
    if not loss.requires_grad:
        return result
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            result[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return result


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: int
    worst_index: int
    n_checked: int
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence | Mapping,
    eps: float = 1e-5,
    fault: tuple[int, float] | None = None,
) -> GradCheckResult:
    """Compare tape gradients of ``f`` against central differences in float64.

    ``f`` receives a list of tensors in the order of ``params`` and returns a
    scalar loss.  The relative error of an entry is
    ``|a - n| / max(|a|, |n|, 1e-12)``.  ``fault=(i, factor)`` multiplies the
    analytic gradient of parameter ``i`` by ``factor`` before comparison,
    which is how the checker itself is tested.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    values = list(params.values()) if isinstance(params, Mapping) else list(params)
    base = [np.array(getattr(p, "data", p), dtype=np.float64) for p in values]

    leaves = [Tensor(b, requires_grad=True) for b in base]
    loss = f(leaves)
    grads = backward(loss)
    analytic = [grads.of(t).astype(np.float64) for t in leaves]
    if fault is not None:
        idx, factor = fault
        analytic[idx] = analytic[idx] * factor

    worst = (0.0, 0, 0)
    checked = 0
    for i, b in enumerate(base):
        flat = b.reshape(-1)
        for j in range(flat.size):
            plus = flat.copy()
            plus[j] += eps
            minus = flat.copy()
            minus[j] -= eps
            fp = _eval(f, base, i, plus.reshape(b.shape))
            fm = _eval(f, base, i, minus.reshape(b.shape))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckResult(
                    float("inf"), i, j, checked,
                    failure=f"non-finite loss when perturbing parameter {i} entry {j}",
                )
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[i].reshape(-1)[j])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            checked += 1
            if rel > worst[0]:
                worst = (rel, i, j)
    return GradCheckResult(worst[0], worst[1], worst[2], checked)


def _eval(f, base: list[np.ndarray], i: int, replacement: np.ndarray) -> float:
    tensors = [Tensor(replacement if k == i else b) for k, b in enumerate(base)]
    return float(f(tensors).data.reshape(-1)[0])
