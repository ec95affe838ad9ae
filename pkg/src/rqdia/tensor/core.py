"""Define-by-run reverse-mode autodiff over numpy arrays.

Operations only record themselves while a :class:`Tape` is active and at
least one input is tracked by it; outside a tape every op is a plain numpy
computation. A tape supports exactly one backward pass.
"""
from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEBUG = bool(os.environ.get("RQDIA_DEBUG"))

_TAPES: list["Tape"] = []


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")
    # make ndarray <op> Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Tape:
    """Records operations for a single backward pass.

    Usage::

        with Tape() as tape:
            loss = ...
        tape.backward(loss, params)
    """

    def __init__(self):
        self.nodes: list | None = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return 0 if self.nodes is None else len(self.nodes)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        """Assign ``grad`` on leaves reachable from ``loss``.

        If ``params`` is given, exactly those tensors receive a gradient
        (zeros when unreachable); otherwise every reachable leaf does.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        params = None if params is None else list(params)
        if params is not None:
            for p in params:
                if not p.requires_grad or p._tape is not None:
                    raise ValueError("backward params must be leaf tensors with requires_grad=True")
        leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
        if loss._tape is self:
            nodes = self.nodes
            grads: list = [None] * (loss._node + 1)
            grads[loss._node] = np.ones(loss.shape, dtype=loss.dtype)
            for idx in range(loss._node, -1, -1):
                g = grads[idx]
                if g is None:
                    continue
                grads[idx] = None
                inputs, needs, fn = nodes[idx]
                in_grads = fn(g, needs)
                for inp, need, gi in zip(inputs, needs, in_grads):
                    if not need or gi is None:
                        continue
                    if inp._tape is self:
                        k = inp._node
                        grads[k] = gi if grads[k] is None else grads[k] + gi
                    else:
                        prev = leaf_grads.get(id(inp))
                        leaf_grads[id(inp)] = (inp, gi if prev is None else prev[1] + gi)
        self.consumed = True
        self.nodes = None
        if params is None:
            for t, g in leaf_grads.values():
                t.grad = np.array(np.broadcast_to(g, t.shape), dtype=t.dtype)
        else:
            for p in params:
                hit = leaf_grads.get(id(p))
                if hit is None:
                    p.grad = np.zeros_like(p.data)
                else:
                    p.grad = np.array(np.broadcast_to(hit[1], p.shape), dtype=p.dtype)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    tape.backward(loss, params)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _tracked(t: Tensor, tape: Tape) -> bool:
    if t._tape is None:
        return t.requires_grad
    return t._tape is tape


def _result(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if DEBUG and all(np.isfinite(t.data).all() for t in inputs) and not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        needs = tuple(_tracked(t, tape) for t in inputs)
        if any(needs):
            out.requires_grad = True
            out._tape = tape
            out._node = len(tape.nodes)
            tape.nodes.append((tuple(inputs), needs, fn))
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                                 _unbroadcast(g, sb) if n[1] else None), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                                 _unbroadcast(-g, sb) if n[1] else None), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g, n: (_unbroadcast(g * bd, ad.shape) if n[0] else None,
                                 _unbroadcast(g * ad, bd.shape) if n[1] else None), "mul")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g, n: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g, n: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g, n: (g * (1 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g, n: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g, n: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g, n: (2 * g * xd,), "square")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    y = np.logaddexp(0, xd).astype(x.dtype)

    def fn(g, n):
        return (g / (1 + np.exp(-xd)),)

    return _result(y, (x,), fn, "softplus")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = _pair(a, b)
    _check_broadcast("min_elementwise", a, b)
    first = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _result(np.where(first, a.data, b.data), (a, b),
                   lambda g, n: (_unbroadcast(g * first, sa) if n[0] else None,
                                 _unbroadcast(g * ~first, sb) if n[1] else None), "min_elementwise")


# ---------------------------------------------------------------- reductions


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    axes = _axes(axis, x.ndim)

    def fn(g, n):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _axes(axis, x.ndim)
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    scale = np.asarray(1.0 / count, dtype=x.dtype)

    def fn(g, n):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape),)

    return _result(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), fn, "mean")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g, n: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _log_softmax_np(x.data, axis)

    def fn(g, n):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), fn, "log_softmax")


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def kl_from_logits(target_logits, logits: Tensor, axis: int = -1) -> Tensor:
    """Per-row D_KL(softmax(target) || softmax(logits)); the target is a constant.

    Both sides go through the same log-softmax routine, so identical inputs
    give an exactly zero value and an exactly zero gradient.
    """
    t = np.asarray(target_logits.data if isinstance(target_logits, Tensor) else target_logits,
                   dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"kl_from_logits: shape mismatch {t.shape} vs {logits.shape}")
    log_p = _log_softmax_np(t, axis)
    log_q = _log_softmax_np(logits.data, axis)
    p, q = np.exp(log_p), np.exp(log_q)
    kl = (p * (log_p - log_q)).sum(axis=axis)

    def fn(g, n):
        return (np.expand_dims(g, axis) * (q - p),)

    return _result(kl, (logits,), fn, "kl_from_logits")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b),
                   lambda g, n: (g @ bd.T if n[0] else None, ad.T @ g if n[1] else None), "matmul")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution (cross-correlation) via im2col."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    oh = conv_output_size(H, kh, stride, padding)
    ow = conv_output_size(W, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # channel-major columns (C*kh*kw, N*oh*ow): the copy walks the input in memory order
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, N * oh * ow)
    wm = w.data.reshape(F, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    y = np.ascontiguousarray(out.reshape(F, N, oh, ow).transpose(1, 0, 2, 3))
    xp_shape = xp.shape

    def fn(g, n):
        gm = g.transpose(1, 0, 2, 3).reshape(F, -1)
        gx = gw = gb = None
        if n[1]:
            gw = (gm @ cols.T).reshape(w.shape)
        if b is not None and n[2]:
            gb = gm.sum(axis=1)
        if n[0]:
            dcols = (wm.T @ gm).reshape(C, kh, kw, N, oh, ow)
            gxp = np.zeros((C, N) + xp_shape[2:], dtype=g.dtype)
            he = stride * (oh - 1) + 1
            we = stride * (ow - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + he:stride, j:j + we:stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _result(y, inputs, fn, "conv2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def fn(g, n):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if n[1] else None
        gbeta = g.sum(axis=lead) if n[2] else None
        gx = None
        if n[0]:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gbeta

    return _result(y.astype(x.dtype), (x, gamma, beta), fn, "layer_norm")


# ---------------------------------------------------------------- indexing / shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g, n: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = next((t for t in tensors if isinstance(t, Tensor)), None)
    tensors = [as_tensor(t, ref) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g, n):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(data, tensors, fn, "concat")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Index-select along ``axis`` (``np.take`` semantics, repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape

    def fn(g, n):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result(np.take(x.data, idx, axis=axis), (x,), fn, "take")


def gather(x: Tensor, index, axis: int) -> Tensor:
    """``np.take_along_axis`` with gradient scattered back by accumulation."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != x.ndim:
        raise ValueError(f"gather: index rank {idx.ndim} does not match input shape {x.shape}")
    axis = axis % x.ndim
    shape = x.shape
    data = np.take_along_axis(x.data, idx, axis=axis)

    def fn(g, n):
        gx = np.zeros(shape, dtype=g.dtype)
        full = []
        bshape = np.broadcast_shapes(idx.shape, g.shape)
        for d in range(len(shape)):
            if d == axis:
                full.append(np.broadcast_to(idx, bshape))
            else:
                view = [1] * len(shape)
                view[d] = bshape[d]
                full.append(np.broadcast_to(np.arange(bshape[d]).reshape(view), bshape))
        np.add.at(gx, tuple(full), g)
        return (gx,)

    return _result(data, (x,), fn, "gather")


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two dimensions by ``pad`` on every side."""
    if pad < 0:
        raise ValueError(f"pad2d: negative pad {pad}")
    cfg = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    H, W = x.shape[-2:]
    return _result(np.pad(x.data, cfg), (x,),
                   lambda g, n: (g[..., pad:pad + H, pad:pad + W],), "pad2d")


def slice2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    H, W = x.shape[-2:]
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ValueError(f"slice2d: window ({top},{left},{height},{width}) outside input {x.shape}")
    shape = x.shape

    def fn(g, n):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., top:top + height, left:left + width] = g
        return (gx,)

    return _result(x.data[..., top:top + height, left:left + width].copy(), (x,), fn, "slice2d")


def forward_op(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch by name; mirrors the op table used in docs and tests."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul, "conv2d": conv2d, "relu": relu, "tanh": tanh,
    "softmax": softmax, "log_softmax": log_softmax, "add": add, "sub": sub,
    "mul": mul, "mean": mean, "sum": sum, "square": square, "exp": exp,
    "log": log, "gather": gather, "min_elementwise": minimum, "pad2d": pad2d,
    "slice2d": slice2d, "softplus": softplus, "layer_norm": layer_norm,
    "reshape": reshape, "concat": concat, "take": take, "neg": neg,
}
