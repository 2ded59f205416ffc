"""Reverse-mode automatic differentiation over dense numpy arrays.

Every op builds a node holding its parents and a closure that maps the
upstream gradient to one gradient per parent.  ``Tensor.backward`` walks the
graph once in reverse topological order and accumulates into leaf ``grad``
buffers, so two backward calls without zeroing add up.

Layout is NCHW throughout.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """A forward value or a gradient became NaN/inf."""


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check(arr: np.ndarray, op: str, what: str = "output") -> None:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite {what} in op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        _check(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- backward --------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                _check(pg, node.op, "gradient")
                if pg.shape != p.data.shape:
                    raise RuntimeError(
                        f"op '{node.op}' produced gradient of shape {pg.shape} for input {p.data.shape}"
                    )
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -------------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Differentiate a scalar output into every reachable leaf's ``grad``."""
    output.backward()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _operand(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor._node(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor._node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def grad_reverse(a: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; scales the upstream gradient by ``-lam`` going back."""
    scale = -float(lam)
    return Tensor._node(a.data, (a,), lambda g: (g * scale,), "grad_reverse")


# -- reductions and shape -------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._node(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in backward."""
    shape, dtype = a.shape, a.data.dtype

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._node(a.data[idx], (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor._node(ad @ bd, (a, b), bw, "matmul")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._node(out, (a,), bw, "log_softmax")


def normalize(a: Tensor, axes: tuple[int, ...], eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Standardize over ``axes`` (population variance); returns (out, mean, var)."""
    x = a.data
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = Tensor._node(xhat, (a,), bw, "normalize")
    return out, mu, var


# -- convolution and resampling ---------------------------------------------------

def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad2d(xd: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return xd
    n, c, h, w = xd.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = xd
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an OIHW kernel.

    Narrow inputs use channel-major im2col; wider ones use one channels-last
    matmul per kernel offset, which keeps the BLAS calls tall and skinny.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d kernel {w.shape} too large for input {x.shape}")
    impl = _conv_shifted if c >= _SHIFT_MIN_CHANNELS else _conv_im2col
    out, bw = impl(x, w, b, stride, pad, oh, ow)
    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._node(out, parents, bw, "conv2d")


_SHIFT_MIN_CHANNELS = 8


def _conv_im2col(x, w, b, stride, pad, oh, ow):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = _pad2d(x.data, pad)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + hs : stride, j : j + ws : stride]
    cols = cols.reshape(c * kh * kw, n * oh * ow)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))
    padded_shape = xp.shape

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, oh, ow)
            gxp = np.zeros((c, n) + padded_shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp)
        return (gx, gw, gb) if b is not None else (gx, gw)

    return out, bw


def _conv_shifted(x, w, b, stride, pad, oh, ow):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xn = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=x.data.dtype)
    xn[:, pad : pad + h, pad : pad + wd] = x.data.transpose(0, 2, 3, 1)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    taps = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # (kh, kw, c, o)

    def window(i, j):
        return np.ascontiguousarray(xn[:, i : i + hs : stride, j : j + ws : stride]).reshape(-1, c)

    acc = np.zeros((n * oh * ow, o), dtype=xn.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += window(i, j) @ taps[i, j]
    if b is not None:
        acc += b.data
    out = np.ascontiguousarray(acc.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def bw(g):
        gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gb = gn.sum(axis=0) if (b is not None and b.requires_grad) else None
        gw = None
        if w.requires_grad:
            gt = np.empty_like(taps)
            for i in range(kh):
                for j in range(kw):
                    gt[i, j] = window(i, j).T @ gn
            gw = np.ascontiguousarray(gt.transpose(3, 2, 0, 1))
        gx = None
        if x.requires_grad:
            gxn = np.zeros_like(xn)
            for i in range(kh):
                for j in range(kw):
                    gxn[:, i : i + hs : stride, j : j + ws : stride] += (gn @ taps[i, j].T).reshape(n, oh, ow, c)
            gx = np.ascontiguousarray(gxn[:, pad : pad + h, pad : pad + wd].transpose(0, 3, 1, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return out, bw


def _windows(xd: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = xd.shape
    if h % k or w % k:
        raise ValueError(f"pool window {k} does not divide spatial dims {h}x{w}")
    return xd.reshape(n, c, h // k, k, w // k, k)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    win = _windows(x.data, k)
    shape = x.shape

    def bw(g):
        g6 = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), win.shape)
        return (g6.reshape(shape),)

    return Tensor._node(win.mean(axis=(3, 5)), (x,), bw, "avg_pool2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    win = _windows(x.data, k)
    n, c, hk, _, wk, _ = win.shape
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hk, wk, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        return (gf.reshape(n, c, hk, wk, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(shape),)

    return Tensor._node(out, (x,), bw, "max_pool2d")


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._node(out, (x,), bw, "upsample_nearest2")


def pool_and_resample(x: Tensor, mode: str, window: int = 2) -> Tensor:
    if mode == "avg":
        return avg_pool2d(x, window)
    if mode == "max":
        return max_pool2d(x, window)
    if mode == "nearest_up2":
        return upsample_nearest2(x)
    raise ValueError(f"unknown resample mode {mode!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
