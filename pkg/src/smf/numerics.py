"""Small reverse-mode autodiff over numpy arrays.

Only the op set the transformer and memory layers need is provided. Graphs are
rebuilt every forward pass and released after ``backward``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Named leaf tensor with an optional row mask on the leading axis.

    Rows where ``row_mask`` is False have their gradient zeroed once backward
    finishes accumulating.
    """

    __slots__ = ("name", "_trainable", "_row_mask")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self._trainable = trainable
        self._row_mask: np.ndarray | None = None

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    @property
    def row_mask(self) -> np.ndarray | None:
        return self._row_mask

    @row_mask.setter
    def row_mask(self, mask) -> None:
        if mask is None:
            self._row_mask = None
            return
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 1 or mask.shape[0] != self.data.shape[0]:
            raise ShapeError(
                f"row_mask of shape {mask.shape} does not match leading dim of "
                f"{self.name or 'parameter'} with shape {self.data.shape}"
            )
        self._row_mask = mask

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, "scale", (a,), bw)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bw(g):
        _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out, "silu", (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matmul with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def linear(x, w) -> Tensor:
    """``x @ w.T`` for a weight stored as (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ w.data)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            _accum(w, g2.T @ x2)

    return _make(x.data @ w.data.T, "linear", (x, w), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, "reshape", (a,), bw)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), "transpose", (a,), bw)


def slice_(a, idx) -> Tensor:
    """Basic (view) indexing; fancy indexing goes through ``take``."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {a.shape}") from None

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(out, "slice", (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}") from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, part)

    return _make(out, "concat", ts, bw)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(out, "sum", (a,), bw)


def take(table, indices) -> Tensor:
    """Gather rows of ``table`` along axis 0 (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"take: indices must be integer, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take: index out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        _accum(table, full)

    return _make(table.data[idx], "take", (table,), bw)


# ---------------------------------------------------------------- nn ops


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is added to the logits first."""
    a = as_tensor(a)
    z = a.data if mask is None else a.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, "softmax", (a,), bw)


def rmsnorm(x, weight, eps: float = 1e-6) -> Tensor:
    if not eps > 0:
        raise ValueError(f"rmsnorm: eps must be positive, got {eps}")
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm: weight {weight.shape} does not match input {x.shape}")
    ms = np.mean(x.data.astype(np.float64) ** 2, axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(x.dtype)
    xhat = x.data * inv

    def bw(g):
        if weight.requires_grad:
            _accum(weight, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * weight.data
            n = x.shape[-1]
            dot = (gx * x.data).sum(axis=-1, keepdims=True)
            _accum(x, inv * gx - (inv**3) * x.data * dot / n)

    return _make(xhat * weight.data, "rmsnorm", (x, weight), bw)


def rope(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding with the half-split convention; cos/sin broadcast to x."""
    x = as_tensor(x)
    h = x.shape[-1] // 2

    def rot(u):
        return np.concatenate([-u[..., h:], u[..., :h]], axis=-1)

    def rot_t(u):
        return np.concatenate([u[..., h:], -u[..., :h]], axis=-1)

    def bw(g):
        _accum(x, g * cos + rot_t(g * sin))

    return _make(x.data * cos + rot(x.data) * sin, "rope", (x,), bw)


def cross_entropy(logits, targets, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean next-token NLL; logits (N, V), targets (N,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape, dtype=np.float64) if weights is None else np.asarray(weights, np.float64)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("cross_entropy: no positions carry weight")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(targets.shape[0])
    nll = lse - z[rows, targets]
    loss = np.asarray((w * nll).sum() / denom, dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        p *= (w / denom)[:, None] * float(g)
        _accum(logits, p)

    return _make(loss, "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------- non-differentiable


def topk(x: np.ndarray, k: int, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Top-k along ``axis``: values sorted descending, ties to the lower index."""
    x = np.asarray(x)
    if not 1 <= k <= x.shape[axis]:
        raise ShapeError(f"topk: k={k} out of range for axis of size {x.shape[axis]}")
    order = np.argsort(-x, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    return np.take_along_axis(x, idx, axis=axis), idx


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every trainable leaf reachable from ``loss``."""
    if loss._released:
        raise GraphError("backward called twice on the same graph")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._backward is None:
        raise GraphError("loss does not depend on any trainable tensor")
    nodes = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in nodes:
        if isinstance(node, Parameter):
            if node._row_mask is not None and node.grad is not None:
                node.grad[~node._row_mask] = 0.0
        else:
            node._backward = None
            node._parents = ()
            node.grad = None
            node._released = True


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    return _topo(root)


def check_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    arr = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``arr`` (modified in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


__all__ = [
    "Tensor", "Parameter", "ShapeError", "GraphError", "no_grad", "as_tensor",
    "add", "mul", "scale", "silu", "matmul", "linear", "reshape", "transpose",
    "slice_", "concat", "sum_", "take", "softmax", "rmsnorm", "rope",
    "cross_entropy", "topk", "backward", "graph_nodes", "check_finite",
    "numerical_grad", "max_rel_error",
]
