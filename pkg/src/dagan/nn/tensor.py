"""Tape-based reverse-mode autodiff over numpy arrays.

Every backward rule is written in terms of Tensor operations, so gradients
can themselves be differentiated (``grad(..., create_graph=True)``). The
gradient penalty of the WGAN critic depends on this.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()
_default_dtype = np.float32


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible along named axes."""

    def __init__(self, message: str, axes: Sequence[str] = ()):
        super().__init__(message)
        self.axes = tuple(axes)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _local.grad_enabled = mode
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``np.float64`` for verification)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._ctx = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._ctx = None
        t.name = None
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return power(self, 0.5)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype or _default_dtype))


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if is_grad_enabled():
        # which parents take gradient is fixed now, so freezing a module only has to cover its forward pass
        mask = tuple(p.requires_grad for p in parents)
        if any(mask):
            out.requires_grad = True
            out._ctx = (backward, parents, mask)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------
def _sum_to_np(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _make(_sum_to_np(x.data, shape), (x,), lambda g: (broadcast_to(g, src),))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _make(data, (x,), lambda g: (sum_to(g, src),))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(a.data ** p, (a,), backward)


def exp(a: Tensor) -> Tensor:
    # recomputed in backward to avoid an output->closure reference cycle
    return _make(np.exp(a.data), (a,), lambda g: (mul(g, exp(a)),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def tanh(a: Tensor) -> Tensor:
    def backward(g):
        y = tanh(a)
        return (mul(g, sub(1.0, mul(y, y))),)

    return _make(np.tanh(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def backward(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, src),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for i in axes:
        count *= a.shape[i]
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape
    return _make(a.data[idx], (a,), lambda g: (_scatter(g, src, idx),))


def _scatter(g: Tensor, shape: tuple, idx) -> Tensor:
    out = np.zeros(shape, dtype=g.data.dtype)
    np.add.at(out, idx, g.data)
    return _make(out, (g,), lambda gg: (getitem(gg, idx),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        for ax, (s0, s1) in enumerate(zip(tensors[0].shape, t.shape)):
            if ax != axis and s0 != s1:
                raise DimensionError(
                    f"concat: axis {ax} mismatch ({s0} vs {s1})", axes=(f"axis{ax}",)
                )
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(sl)))
        return tuple(grads)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})",
            axes=("a[-1]", "b[-2]"),
        )
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(matmul(g, swap_last(b)), sa) if a.requires_grad else None
        gb = sum_to(matmul(swap_last(a), g), sb) if b.requires_grad else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# sliding windows (im2col) and their adjoint
# ---------------------------------------------------------------------------
def _out_size(n: int, k: int, s: int, p0: int, p1: int) -> int:
    return (n + p0 + p1 - k) // s + 1


def _unfold_np(x, kh, kw, stride, pads):
    n, c, h, w = x.shape
    pt, pb, pl, pr = pads
    if any(pads):
        xp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=x.dtype)
        xp[:, :, pt:pt + h, pl:pl + w] = x
        x = xp
    ho = _out_size(h, kh, stride, pt, pb)
    wo = _out_size(w, kw, stride, pl, pr)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _fold_np(cols, shape, kh, kw, stride, pads):
    n, c, h, w = shape
    pt, pb, pl, pr = pads
    ho = _out_size(h, kh, stride, pt, pb)
    wo = _out_size(w, kw, stride, pl, pr)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out[:, :, pt:pt + h, pl:pl + w]


def unfold(x: Tensor, kh: int, kw: int, stride: int, pads: tuple) -> Tensor:
    """[N,C,H,W] -> [N, C*kh*kw, H'*W'] patch matrix."""
    shape = x.shape
    return _make(
        _unfold_np(x.data, kh, kw, stride, pads),
        (x,),
        lambda g: (fold(g, shape, kh, kw, stride, pads),),
    )


def fold(cols: Tensor, shape: tuple, kh: int, kw: int, stride: int, pads: tuple) -> Tensor:
    """Adjoint of :func:`unfold`: scatter-add patches back onto an image."""
    return _make(
        _fold_np(cols.data, shape, kh, kw, stride, pads),
        (cols,),
        lambda g: (unfold(g, kh, kw, stride, pads),),
    )


def conv_matmul(x: Tensor, w2d: Tensor, kh: int, kw: int, stride: int, pads: tuple) -> Tensor:
    """``w2d @ unfold(x)`` without keeping the patch matrix alive for backward.

    For stride 1 the input gradient is itself a convolution of the output
    gradient with the flipped, transposed kernel, which avoids materialising
    the (usually wider) input-side patch matrix.
    """
    shape = x.shape
    n, c, h, w = shape
    k = w2d.shape[0]
    pt, pb, pl, pr = pads
    flip_ok = stride == 1 and pt + pb == kh - 1 and pl + pr == kw - 1

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            if flip_ok:
                ho, wo = h, w
                kern = reshape(w2d, (k, c, kh, kw))[:, :, ::-1, ::-1]
                kern_t = reshape(transpose(kern, (1, 0, 2, 3)), (c, k * kh * kw))
                g_img = reshape(g, (n, k, ho, wo))
                gx = reshape(conv_matmul(g_img, kern_t, kh, kw, 1, (pb, pt, pr, pl)), shape)
            else:
                gx = fold(matmul(swap_last(w2d), g), shape, kh, kw, stride, pads)
        if w2d.requires_grad:
            gw = sum_to(matmul(g, swap_last(unfold(x, kh, kw, stride, pads))), w2d.shape)
        return gx, gw

    data = np.matmul(w2d.data, _unfold_np(x.data, kh, kw, stride, pads))
    return _make(data, (x, w2d), backward)


# ---------------------------------------------------------------------------
# autograd engine
# ---------------------------------------------------------------------------
def _topo(roots: Iterable[Tensor]) -> list:
    order, seen = [], set()
    stack = [(r, False) for r in roots if r.requires_grad]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p, live in zip(node._ctx[1], node._ctx[2]):
                if live and id(p) not in seen:
                    stack.append((p, False))
    return order


def _run(outputs, grad_outputs, create_graph):
    grads: dict[int, Tensor] = {}
    for o, g in zip(outputs, grad_outputs):
        if not o.requires_grad:
            continue
        if g is None:
            g = np.ones_like(o.data)
        g = g if isinstance(g, Tensor) else Tensor._wrap(np.asarray(g, dtype=o.data.dtype))
        grads[id(o)] = grads[id(o)] + g if id(o) in grads else g
    order = _topo(outputs)
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._ctx is None:
                continue
            fn, parents, mask = node._ctx
            for p, live, pg in zip(parents, mask, fn(g)):
                if pg is None or not live:
                    continue
                key = id(p)
                grads[key] = add(grads[key], pg) if key in grads else pg
    return order, grads


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False) -> list:
    """Gradients of ``outputs`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs that are unreachable get a zero tensor. With ``create_graph`` the
    returned tensors are themselves differentiable.
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if grad_outputs is None:
        grad_outputs = [None] * len(outputs)
    _, grads = _run(outputs, grad_outputs, create_graph)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        result.append(g if g is not None else Tensor._wrap(np.zeros_like(x.data)))
    return result


def backward(output: Tensor, grad_output=None) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate tensors requiring grad receive their gradient as well
    (overwritten, not accumulated).
    """
    if grad_output is None and output.size != 1:
        raise ValueError("backward() on a non-scalar tensor needs grad_output")
    order, grads = _run([output], [grad_output], False)
    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.data.copy() if node.grad is None else node.grad + g.data
        else:
            node.grad = g.data
