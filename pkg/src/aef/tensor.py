"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` whenever one of their
inputs is being watched.  ``Tape.backward`` walks the record once in reverse
and returns gradients for every watched leaf.

    >>> with Tape() as tape:
    ...     x = tape.watch([1.0, 2.0, 3.0])
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)[x.node_id]
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()

STD_EPS = 1e-8


class ShapeError(ValueError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "node_id", "requires_grad", "_tape")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def _live_on(self, tape: "Tape") -> bool:
        return self.node_id is not None and self._tape is tape and not tape.consumed

    # arithmetic sugar -------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive operations for one optimization context.

    Node ids are indices into ``nodes``, so recording order is a valid
    topological order.  A tape can be differentiated once.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple, Callable | None]] = []
        self.leaves: set[int] = set()
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf and return its Tensor."""
        t = value if isinstance(value, Tensor) else Tensor(value)
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        t.requires_grad = True
        t.node_id = len(self.nodes)
        t._tape = self
        self.nodes.append(((), None))
        self.leaves.add(t.node_id)
        return t

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        out = Tensor(data, requires_grad=True)
        ids = tuple(t.node_id if t._live_on(self) else None for t in inputs)
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append((ids, vjp))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Return d(loss)/d(leaf) for every watched leaf, keyed by node id.

        Leaves not connected to ``loss`` get a zero gradient.
        """
        if self.consumed:
            raise RuntimeError("tape already consumed; run a new forward pass")
        if loss.data.size != 1 or loss.ndim != 0:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {}
        if loss._tape is self and loss.node_id is not None:
            grads[loss.node_id] = np.ones((), dtype=np.float64)
            for nid in range(loss.node_id, -1, -1):
                g = grads.get(nid)
                if g is None:
                    continue
                ids, vjp = self.nodes[nid]
                if vjp is None:
                    continue
                del grads[nid]
                for iid, gi in zip(ids, vjp(g)):
                    if iid is None or gi is None:
                        continue
                    if iid in grads:
                        grads[iid] = grads[iid] + gi
                    else:
                        grads[iid] = gi
        out = {}
        for lid in sorted(self.leaves):
            out[lid] = grads.get(lid)
        self.nodes = []
        return out

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Like :meth:`backward` but returns dense gradients for ``wrt``."""
        table = self.backward(loss)
        result = []
        for t in wrt:
            g = table.get(t.node_id)
            result.append(np.zeros_like(t.data) if g is None else np.broadcast_to(g, t.shape).copy())
        return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _recording(*inputs: Tensor) -> "Tape | None":
    tape = active_tape()
    if tape is None or tape.consumed:
        return None
    for t in inputs:
        if t._live_on(tape):
            return tape
    return None


def _make(data, inputs, vjp) -> Tensor:
    tape = _recording(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


# elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError(f"div: zero in denominator of shape {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), vjp)


# elementwise unary ----------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)

    def vjp(g):
        if np.any(out == 0):
            raise ZeroDivisionError("sqrt: gradient undefined at 0; add a stabilizer")
        return (g * 0.5 / out,)

    return _make(out, (x,), vjp)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes inside the bounds and is zero outside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# structure ------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, vjp)


# reductions -----------------------------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (x,), lambda g: (_expand_reduced(g, shape, axes, keepdims),))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _make(out, (x,), lambda g: (_expand_reduced(g, shape, axes, keepdims) / n,))


def var(x, axis=None, keepdims=False) -> Tensor:
    """Population variance."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        return (_expand_reduced(g, shape, axes, keepdims) * (2.0 / n) * centered,)

    return _make(out, (x,), vjp)


def std(x, axis=None, keepdims=False) -> Tensor:
    """sqrt(population variance + 1e-8)."""
    return sqrt(add(var(x, axis, keepdims), STD_EPS))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), vjp)


def norm(x, axis=None, keepdims=False) -> Tensor:
    """L2 norm; the gradient at a zero norm is taken as zero."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    xd = x.data
    out = np.sqrt((xd * xd).sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        n = out if keepdims else np.expand_dims(out, axes)
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, 1.0 / safe, 0.0)
        return (_expand_reduced(g, xd.shape, axes, keepdims) * xd * scale,)

    return _make(out, (x,), vjp)


# convolution ----------------------------------------------------------------

def _shift_offsets(k: int, wp: int) -> list[tuple[int, int, int]]:
    return [(i, j, i * wp + j) for i in range(k) for j in range(k)]


def _conv_cf(xp: np.ndarray, w: np.ndarray, h: int, wd: int) -> np.ndarray:
    """Correlate padded channel-first input (C, N, Hp, Wp) with w (O, C, k, k).

    Works on the flattened padded grid, where each kernel tap is a constant
    offset, so every shifted operand is a view rather than a copy.  Results
    for positions outside the valid (h, wd) window are discarded.
    """
    c = xp.shape[0]
    n, hp, wp = xp.shape[1:]
    o, _, k, _ = w.shape
    flat = xp.reshape(c, -1)
    span = flat.shape[1] - (k - 1) * (wp + 1)
    stacked = w.transpose(2, 3, 0, 1).reshape(k * k * o, c) @ flat
    out = np.zeros((o, flat.shape[1]))
    acc = out[:, :span]
    for t, (_, _, off) in enumerate(_shift_offsets(k, wp)):
        acc += stacked[t * o:(t + 1) * o, off:off + span]
    return out.reshape(o, n, hp, wp)[:, :, :h, :wd]


def conv2d(x, w, b=None) -> Tensor:
    """Same-size 2-D convolution (stride 1, zero padding k//2).

    x: (N, C, H, W) or (C, H, W); w: (O, C, k, k) with odd k; b: (O,).
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4 or w.shape[1] != xd.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = xd.shape
    o, _, k, _ = w.shape
    p = k // 2
    pad = ((0, 0), (0, 0), (p, p), (p, p))
    xp = np.pad(xd.transpose(1, 0, 2, 3), pad)
    wd_ = w.data
    out = _conv_cf(xp, wd_, h, wd).transpose(1, 0, 2, 3)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    out = np.ascontiguousarray(out[0] if squeeze else out)
    xshape = x.shape

    def vjp(g):
        g4 = g[None] if squeeze else g
        gcf = g4.transpose(1, 0, 2, 3)
        flipped = wd_[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _conv_cf(np.pad(gcf, pad), flipped, h, wd).transpose(1, 0, 2, 3).reshape(xshape)
        # output gradient laid on the padded grid so tap offsets line up with xp
        hp, wp = h + 2 * p, wd + 2 * p
        gpad = np.zeros((o, n, hp, wp))
        gpad[:, :, :h, :wd] = gcf
        gflat = gpad.reshape(o, -1)
        xflat = xp.reshape(c, -1)
        span = xflat.shape[1] - (k - 1) * (wp + 1)
        gw = np.empty_like(wd_)
        for i, j, off in _shift_offsets(k, wp):
            gw[:, :, i, j] = gflat[:, :span] @ xflat[:, off:off + span].T
        grads = [gx, gw]
        if b is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, inputs, vjp)


# oracle ---------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    base = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.empty_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(as_tensor(f(Tensor(base.copy()))).data)
        flat[i] = orig - h
        fm = float(as_tensor(f(Tensor(base.copy()))).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def value_and_grad(f: Callable[[Tensor], Tensor], x) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``f`` at ``x`` on a fresh tape and return (value, gradient)."""
    with Tape() as tape:
        xt = tape.watch(np.array(as_tensor(x).data, dtype=np.float64))
        loss = f(xt)
    (g,) = tape.gradient(loss, [xt])
    return float(loss.data), g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / scale)
