"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and remembers the primitive that
produced it. Calling :func:`backward` on a scalar tensor walks the recorded
graph in reverse topological order and returns the gradient of every leaf
that was created with ``requires_grad=True``.

Broadcasting is limited to scalar-with-array. Anything else needs an explicit
reshape or one of the axis-aware primitives (``affine``, ``sum``, ``mean``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ContractViolation",
    "Tensor",
    "Graph",
    "tensor",
    "backward",
    "finite_diff",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "square",
    "sqrt",
    "absolute",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "concat",
    "stack",
    "take",
    "reshape",
    "transpose",
    "l2_normalize",
    "affine",
    "conv2d",
    "conv3d",
]


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class _SliceGrad:
    """Gradient that is non-zero only on ``parent[key]``."""

    __slots__ = ("key", "value")

    def __init__(self, key, value):
        self.key = key
        self.value = value


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, fn, op)
    return Tensor(data, op=op)


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (inputs first)."""

    nodes: list

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list:
        return [n for n in self.nodes if not n._parents]


def backward(loss: Tensor) -> dict:
    """Gradient of a scalar ``loss`` with respect to every reachable leaf.

    Returns a dict keyed by leaf :class:`Tensor` (identity hashed). Leaves
    that were not created with ``requires_grad=True`` are not included.
    """
    if loss.ndim != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = Graph.from_root(loss)
    grads = {id(loss): np.ones((), dtype=np.float64)}
    owned = set()
    result = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if not node._parents:
            result[node] = np.zeros(node.shape) if g is None else np.asarray(g, dtype=np.float64)
            continue
        if g is None:
            continue
        contributions = node._backward(g)
        for parent, c in zip(node._parents, contributions):
            if c is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if isinstance(c, _SliceGrad):
                acc = grads.get(pid)
                if acc is None:
                    acc = np.zeros(parent.shape)
                    owned.add(pid)
                elif pid not in owned:
                    acc = acc.copy()
                    owned.add(pid)
                acc[c.key] += c.value
                grads[pid] = acc
            elif pid in grads:
                grads[pid] = grads[pid] + c
                owned.add(pid)
            else:
                grads[pid] = c
                owned.discard(pid)
    return result


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ContractViolation("finite_diff step must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat = x.reshape(-1)
    grad = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), fn, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), fn, "matmul")


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # tanh form avoids overflow in exp for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x, floor: float | None = None) -> Tensor:
    """Natural log. With ``floor``, inputs below it are clamped (zero gradient there)."""
    x = _as_tensor(x)
    if floor is None:
        return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")
    keep = x.data > floor
    clamped = np.where(keep, x.data, floor)

    def fn(g):
        return (np.where(keep, g / clamped, 0.0),)

    return _node(np.log(clamped), (x,), fn, "log")


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def softmax(x) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), fn, "softmax")


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), fn, "log_softmax")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), fn, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _node(out, (x,), fn, "mean")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ContractViolation("concat of an empty sequence")
    axis = axis % xs[0].ndim
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def fn(g):
        out = []
        for i, x in enumerate(xs):
            if not x.requires_grad:
                out.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(key)])
        return tuple(out)

    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ContractViolation(f"concat: {exc}") from None
    return _node(data, tuple(xs), fn, "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs or any(x.shape != xs[0].shape for x in xs):
        raise ContractViolation("stack needs a non-empty sequence of equal shapes")
    axis = axis % (xs[0].ndim + 1)

    def fn(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if x.requires_grad else None for i, x in enumerate(xs))

    return _node(np.stack([x.data for x in xs], axis=axis), tuple(xs), fn, "stack")


def _check_basic_key(key):
    items = key if isinstance(key, tuple) else (key,)
    for k in items:
        if not (k is Ellipsis or isinstance(k, (slice, int, np.integer))):
            raise ContractViolation(f"only basic int/slice indexing is supported, got {type(k).__name__}")


def _getitem(x: Tensor, key) -> Tensor:
    _check_basic_key(key)
    return _node(x.data[key], (x,), lambda g: (_SliceGrad(key, g),), "slice")


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis`` (indices may repeat)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def fn(g):
        acc = np.zeros(x.shape)
        np.add.at(np.moveaxis(acc, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (acc,)

    return _node(np.take(x.data, idx, axis=axis), (x,), fn, "take")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(f"reshape: {exc}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _node(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along the last axis."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x.data / safe
    live = norm > eps

    def fn(g):
        radial = np.where(live, out * (g * out).sum(axis=-1, keepdims=True), 0.0)
        return ((g - radial) / safe,)

    return _node(out, (x,), fn, "l2_normalize")


def affine(x, scale=None, shift=None, axis: int = 1) -> Tensor:
    """Per-channel ``x * scale + shift`` where both vectors index ``axis``."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    parents = [x]
    out = x.data
    s = b = None
    if scale is not None:
        s = _as_tensor(scale)
        if s.shape != (x.shape[axis],):
            raise ContractViolation(f"affine: scale shape {s.shape} does not match axis size {x.shape[axis]}")
        parents.append(s)
        out = out * s.data.reshape(bshape)
    if shift is not None:
        b = _as_tensor(shift)
        if b.shape != (x.shape[axis],):
            raise ContractViolation(f"affine: shift shape {b.shape} does not match axis size {x.shape[axis]}")
        parents.append(b)
        out = out + b.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def fn(g):
        grads = [g * s.data.reshape(bshape) if s is not None else g]
        if s is not None:
            grads.append((g * x.data).sum(axis=others) if s.requires_grad else None)
        if b is not None:
            grads.append(g.sum(axis=others) if b.requires_grad else None)
        return tuple(grads)

    return _node(out, tuple(parents), fn, "affine")


# ---------------------------------------------------------------------------
# convolution


def _triple(v, name):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(v)
    if len(v) != 3:
        raise ContractViolation(f"{name} must have 3 entries, got {v}")
    return v


def _pad_pairs(padding):
    pads = _triple(padding, "padding")
    out = []
    for p in pads:
        if isinstance(p, (int, np.integer)):
            out.append((int(p), int(p)))
        else:
            lo, hi = p
            out.append((int(lo), int(hi)))
    return tuple(out)


def conv_output_size(size: int, kernel: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (size + pad_lo + pad_hi - kernel) // stride + 1


def conv3d(x, w, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation over (time, height, width).

    ``x`` is ``[C, T, H, W]`` or batched ``[B, C, T, H, W]``; ``w`` is
    ``[C_out, C, kt, kh, kw]``. ``padding`` accepts an int, a per-axis int, or
    per-axis ``(before, after)`` pairs so causal temporal padding is possible.
    Output size per axis is ``floor((D + pad_before + pad_after - k) / s) + 1``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    unbatched = x.ndim == 4
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 5 or w.ndim != 5:
        raise ContractViolation(f"conv3d: expected 5-D input and kernel, got {x.shape} and {w.shape}")
    B, C, T, H, W = x.shape
    Co, Ck, kt, kh, kw = w.shape
    if Ck != C:
        raise ContractViolation(f"conv3d: kernel expects {Ck} input channels, input has {C}")
    st, sh, sw = (int(s) for s in _triple(stride, "stride"))
    if min(st, sh, sw) < 1:
        raise ContractViolation("conv3d: stride must be >= 1")
    pads = _pad_pairs(padding)
    To = conv_output_size(T, kt, st, *pads[0])
    Ho = conv_output_size(H, kh, sh, *pads[1])
    Wo = conv_output_size(W, kw, sw, *pads[2])
    if min(To, Ho, Wo) < 1:
        raise ContractViolation(f"conv3d: kernel {w.shape[2:]} does not fit padded input {x.shape[2:]}")

    xp = np.pad(x.data, ((0, 0), (0, 0)) + pads) if any(p != (0, 0) for p in pads) else x.data
    wd = w.data

    def windows(dt):
        xs = xp[:, :, dt : dt + (To - 1) * st + 1 : st]
        return sliding_window_view(xs, (kh, kw), axis=(3, 4))[:, :, :, : (Ho - 1) * sh + 1 : sh, : (Wo - 1) * sw + 1 : sw]

    acc = np.zeros((B, To, Ho, Wo, Co))
    for dt in range(kt):
        acc += np.tensordot(windows(dt), wd[:, :, dt], axes=([1, 5, 6], [1, 2, 3]))
    out = np.ascontiguousarray(acc.transpose(0, 4, 1, 2, 3))

    def fn(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(wd)
            for dt in range(kt):
                part = np.tensordot(windows(dt), gt, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
                gw[:, :, dt] = part.transpose(3, 0, 1, 2)
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for dt in range(kt):
                gwin = np.tensordot(gt, wd[:, :, dt], axes=([4], [0]))
                gwin = gwin.transpose(0, 4, 1, 2, 3, 5, 6)
                tsl = slice(dt, dt + (To - 1) * st + 1, st)
                for i in range(kh):
                    hsl = slice(i, i + (Ho - 1) * sh + 1, sh)
                    for j in range(kw):
                        wsl = slice(j, j + (Wo - 1) * sw + 1, sw)
                        gxp[:, :, tsl, hsl, wsl] += gwin[..., i, j]
            (t0, t1), (h0, h1), (w0, w1) = pads
            gx = gxp[:, :, t0 : t0 + T, h0 : h0 + H, w0 : w0 + W]
        return gx, gw

    result = _node(out, (x, w), fn, "conv3d")
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


def conv2d(x, w, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation; ``x`` is ``[N, C, H, W]``, ``w`` is ``[C_out, C, kh, kw]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ContractViolation(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if isinstance(stride, (int, np.integer)):
        stride = (stride, stride)
    if isinstance(padding, (int, np.integer)):
        padding = (padding, padding)
    N, C, H, W = x.shape
    x5 = reshape(x, (N, C, 1, H, W))
    w5 = reshape(w, w.shape[:2] + (1,) + w.shape[2:])
    y = conv3d(x5, w5, stride=(1,) + tuple(stride), padding=(0,) + tuple(padding))
    return reshape(y, y.shape[:2] + y.shape[3:])
