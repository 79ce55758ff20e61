"""Reverse-mode automatic differentiation on dense float64 tensors.

A :class:`Tensor` wraps a numpy array. Applying a primitive to tensors that
participate in differentiation records a :class:`Node` (the tape entry)
holding the inputs and a backward closure; :func:`backward` replays the
reachable tape in reverse topological order and accumulates gradients into
the leaves. Everything is 64-bit: the finite-difference tolerances used to
validate gradients are not reachable in float32.

Elementwise arithmetic requires equal shapes or a scalar operand; the only
shape-changing broadcasts are the explicit :func:`broadcast_to` primitive and
the internal parameter broadcasts inside ``layer_norm``/``softmax`` masks.
Keeping broadcasting loud makes shape bugs surface at the offending op.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DomainError, ShapeError

COSINE_NORM_FLOOR = 1e-12


class Node:
    """Tape entry: the primitive, its input tensors, and a backward closure.

    ``backward(grad_out)`` returns one gradient array (or None) per input,
    aligned with ``inputs``.
    """

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(_tracked(t) for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward)
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every tracked leaf.

    Repeated calls without ``zero_grad`` accumulate additively. Each tape
    node reachable from ``root`` is visited exactly once.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if root.node is None:
        if root.requires_grad:
            seed = np.ones_like(root.data)
            root.grad = seed if root.grad is None else root.grad + seed
        return

    # iterative post-order topological sort over the reachable graph
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if id(parent) not in visited and _tracked(parent):
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for tensor in reversed(order):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None:
            if tensor.requires_grad:
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue
        for parent, pg in zip(tensor.node.inputs, tensor.node.backward(g)):
            if pg is None or not _tracked(parent):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise primitives


def _elementwise_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(op, f"operand shapes {a.shape} and {b.shape} differ and neither is scalar")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient contributions down to ``shape`` (scalar or equal-shape)."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes("add", a, b)
    out = a.data + b.data

    def bwd(g):
        ga = _reduce_to(g, a.shape) if _tracked(a) else None
        gb = _reduce_to(g, b.shape) if _tracked(b) else None
        return ga, gb

    return _make("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        ga = _reduce_to(g, a.shape) if _tracked(a) else None
        gb = _reduce_to(-g, b.shape) if _tracked(b) else None
        return ga, gb

    return _make("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        ga = _reduce_to(g * b.data, a.shape) if _tracked(a) else None
        gb = _reduce_to(g * a.data, b.shape) if _tracked(b) else None
        return ga, gb

    return _make("mul", out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes("div", a, b)
    out = a.data / b.data

    def bwd(g):
        ga = _reduce_to(g / b.data, a.shape) if _tracked(a) else None
        gb = (
            _reduce_to(-g * a.data / (b.data * b.data), b.shape) if _tracked(b) else None
        )
        return ga, gb

    return _make("div", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra and structure


def _stacked_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # collapse leading dims so stacked @ 2-d runs as one GEMM
    if x.ndim > 2 and w.ndim == 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ w).reshape(*lead, w.shape[1])
    return np.matmul(x, w)


def matmul(a, b) -> Tensor:
    """Matrix product; stacked (batched) operands follow numpy semantics."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = _stacked_matmul(a.data, b.data)
    except ValueError as exc:  # non-broadcastable batch dims
        raise ShapeError("matmul", f"{a.shape} @ {b.shape}: {exc}") from None

    def _unbatch(g, shape):
        # sum the gradient over batch dims that were broadcast in the forward
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        for ax, n in enumerate(shape[:-2]):
            if n == 1 and g.shape[ax] != 1:
                g = g.sum(axis=ax, keepdims=True)
        return g

    def bwd(g):
        ga = gb = None
        if _tracked(a):
            ga = _unbatch(_stacked_matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if _tracked(b):
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbatch(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bwd)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make("transpose", out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _make("reshape", out, (a,), bwd)


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the expanded axes."""
    a = _as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", f"cannot broadcast {a.shape} to {shape}") from None
    orig = a.shape

    def bwd(g):
        extra = g.ndim - len(orig)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        keep = tuple(ax for ax, n in enumerate(orig) if n == 1 and g.shape[ax] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _make("broadcast_to", out, (a,), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(parts), bwd)


def index(a, key) -> Tensor:
    """Basic slicing/integer indexing; gradient scatters into a zero tensor."""
    a = _as_tensor(a)
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _make("index", out, (a,), bwd)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with a 1-d integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take", f"indices must be 1-d, got shape {idx.shape}")
    out = np.take(a.data, idx, axis=axis)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make("take", out, (a,), bwd)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids are data, not differentiated."""
    table = _as_tensor(table)
    if table.data.ndim != 2:
        raise ShapeError("embedding", f"table must be 2-d, got {table.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DomainError(f"embedding ids out of range [0, {table.shape[0]})")
    out = table.data[idx]
    rows = table.shape[0]

    def bwd(g):
        full = np.zeros((rows, table.shape[1]))
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make("embedding", out, (table,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape) / count,)

    return _make("mean", out, (a,), bwd)


def _extreme(a, axis, op: str) -> Tensor:
    a = _as_tensor(a)
    pick = np.argmax if op == "max" else np.argmin
    if axis is None:
        flat_idx = int(pick(a.data))  # first occurrence: lowest index wins ties
        out = np.asarray(a.data.reshape(-1)[flat_idx])
        shape = a.shape

        def bwd(g):
            full = np.zeros(shape)
            full.reshape(-1)[flat_idx] = g
            return (full,)

        return _make(op, out, (a,), bwd)

    ax = axis % a.data.ndim
    idx = pick(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(op, out, (a,), bwd)


def max_(a, axis=None) -> Tensor:
    """Max reduction; ties route the gradient to the lowest index."""
    return _extreme(a, axis, "max")


def min_(a, axis=None) -> Tensor:
    return _extreme(a, axis, "min")


def argmax(a, axis=None) -> np.ndarray:
    return np.argmax(_as_tensor(a).data, axis=axis)


def argmin(a, axis=None) -> np.ndarray:
    return np.argmin(_as_tensor(a).data, axis=axis)


# ---------------------------------------------------------------------------
# nonlinearities


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make("log", out, (a,), bwd)


def sqrt(a) -> Tensor:
    """Element-wise square root; the subgradient at 0 is 0."""
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bwd(g):
        safe = np.where(out > 0.0, out, np.inf)
        return (g * 0.5 / safe,)

    return _make("sqrt", out, (a,), bwd)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes through only strictly inside."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi

    def bwd(g):
        return (g * inside,)

    return _make("clamp", out, (a,), bwd)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    cdf = x * (1.0 / math.sqrt(2.0))
    erf(cdf, out=cdf)
    cdf += 1.0
    cdf *= 0.5
    out = x * cdf

    def bwd(g):
        pdf = x * x
        pdf *= -0.5
        np.exp(pdf, out=pdf)
        pdf *= 1.0 / math.sqrt(2.0 * math.pi)
        pdf *= x
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _make("gelu", out, (a,), bwd)


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last dimension with an optional additive mask.

    ``mask`` is a constant array broadcastable to ``a`` whose entries are 0
    (keep) or -inf (drop); dropped entries come out exactly 0.
    """
    a = _as_tensor(a)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        try:
            shifted = a.data + mask
        except ValueError:
            raise ShapeError(
                "softmax", f"mask shape {mask.shape} does not broadcast to {a.shape}"
            ) from None
    else:
        shifted = a.data.copy()
    shifted -= shifted.max(axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=-1, keepdims=True)
    out = shifted

    def bwd(g):
        gx = g * out
        dot = gx.sum(axis=-1, keepdims=True)
        gx -= out * dot
        return (gx,)

    return _make("softmax", out, (a,), bwd)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension, then apply the learned scale and shift."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError("layer_norm", f"scale/shift must be ({d},), got {scale.shape}/{shift.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    y = x.data - mu
    var = np.einsum("...d,...d->...", y, y)[..., None] / d
    var += eps
    inv = 1.0 / np.sqrt(var)
    y *= inv
    out = y * scale.data
    out += shift.data

    def bwd(g):
        gx = gs = gb = None
        if _tracked(x):
            gh = g * scale.data
            gm = gh.mean(axis=-1, keepdims=True)
            gyy = np.einsum("...d,...d->...", gh, y)[..., None] / d
            gx = gh - gm
            gx -= y * gyy
            gx *= inv
        if _tracked(scale):
            gs = np.einsum("nd,nd->d", g.reshape(-1, d), y.reshape(-1, d))
        if _tracked(shift):
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gs, gb

    return _make("layer_norm", out, (x, scale, shift), bwd)


def cosine_sim(u, v) -> Tensor:
    """Cosine similarity of two vectors; the denominator is floored at 1e-12."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.shape != v.shape:
        raise ShapeError("cosine_sim", f"expected equal-length vectors, got {u.shape} and {v.shape}")
    s = float(np.sum(u.data * v.data))
    nu = math.sqrt(float(np.sum(u.data * u.data)))
    nv = math.sqrt(float(np.sum(v.data * v.data)))
    raw = nu * nv
    denom = max(raw, COSINE_NORM_FLOOR)
    c = s / denom
    out = np.asarray(c)

    def bwd(g):
        g = float(g)
        gu = gv = None
        if _tracked(u):
            if raw > COSINE_NORM_FLOOR:
                gu = g * (v.data / denom - c * u.data / (nu * nu))
            else:
                gu = g * v.data / denom
        if _tracked(v):
            if raw > COSINE_NORM_FLOOR:
                gv = g * (u.data / denom - c * v.data / (nv * nv))
            else:
                gv = g * u.data / denom
        return gu, gv

    return _make("cosine_sim", out, (u, v), bwd)


# ---------------------------------------------------------------------------
# generic dispatch and numerical verification

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "concat": concat,
    "index": index,
    "take": take,
    "embedding": embedding,
    "sum": sum_,
    "mean": mean,
    "max": max_,
    "min": min_,
    "log": log,
    "sqrt": sqrt,
    "clamp": clamp,
    "gelu": gelu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "cosine_sim": cosine_sim,
}


def apply_primitive(op: str, inputs: Iterable, **attrs) -> Tensor:
    """Apply a primitive by name. ``inputs`` maps to positional tensor args."""
    if op not in PRIMITIVES:
        raise ContractError(f"unknown primitive {op!r}")
    fn = PRIMITIVES[op]
    if op == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor and be deterministic. The
    error at each coordinate is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8).
    """
    if not 1e-7 <= step <= 1e-3:
        raise ContractError(f"step {step} outside [1e-7, 1e-3]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if y.data.size != 1:
        raise ContractError("finite_diff_check: f must return a scalar")
    if not np.isfinite(y.data).all():
        raise DomainError("finite_diff_check: f returned a non-finite value")
    backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.reshape(-1)

    flat = x.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sign, slot in ((+1.0, 0), (-1.0, 1)):
            bumped = flat.copy()
            bumped[i] += sign * step
            val = f(Tensor(bumped.reshape(x.shape)))
            if not np.isfinite(val.data).all():
                raise DomainError("finite_diff_check: f returned a non-finite value")
            if slot == 0:
                hi = val.item()
            else:
                lo = val.item()
        numeric[i] = (hi - lo) / (2.0 * step)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))
