"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded,
which is how inference runs::

    with Tape() as tape:
        loss = reduce("mean", activation("sigmoid", x))
    tape.backward(loss)
    x.grad

There is no implicit broadcasting. Use :func:`reshape` and
:func:`broadcast_to` to align shapes explicitly.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    AxisOutOfRange,
    KernelTooLarge,
    NonFiniteError,
    NotScalar,
    ShapeMismatch,
    TapeConsumed,
    TapeError,
)

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


def active_tape() -> Optional["Tape"]:
    s = _stack()
    return s[-1] if s else None


class Tensor:
    """N-dimensional real array, optionally tracked for gradients."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeMismatch(f"all extents must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
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
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise NotScalar(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return elementwise("add", self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return elementwise("sub", self, other)
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise("mul", self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype), requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype), requires_grad)


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended as operations execute, so the record is already in
    topological order; :meth:`backward` walks it in exact reverse. A tape
    can be consumed only once.
    """

    def __init__(self):
        self._entries: list = []
        self._produced: set = set()
        self._leaves: dict = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        s = _stack()
        if s and s[-1] is self:
            s.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def _record(self, out: Tensor, parents: Sequence[Tensor], vjp: Callable):
        if self.consumed:
            raise TapeConsumed("cannot record on a tape that has already run backward")
        for p in parents:
            if p.requires_grad and id(p) not in self._produced:
                self._leaves.setdefault(id(p), p)
        self._entries.append((out, tuple(parents), vjp))
        self._produced.add(id(out))

    def backward(self, output: Tensor) -> None:
        if self.consumed:
            raise TapeConsumed("backward already ran on this tape")
        if output.size != 1:
            raise NotScalar(f"backward needs a scalar output, shape is {output.shape}")
        if id(output) not in self._produced:
            raise TapeError("output was not produced on this tape")
        grads = {id(output): np.ones_like(output.data)}
        for out, parents, vjp in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, gp in zip(parents, vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + gp if k in grads else gp
        for k, leaf in self._leaves.items():
            g = grads.get(k)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=leaf.dtype)
        self.consumed = True
        self._entries.clear()
        self._produced.clear()


def backward(output: Tensor, tape: Tape) -> None:
    tape.backward(output)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError("operation produced a non-finite value")
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, needs)
    if needs:
        tape._record(out, parents, vjp)
    return out


def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")


def _seqsum(a: np.ndarray, axis: int) -> np.ndarray:
    # left-to-right accumulation; np.sum uses pairwise summation
    return np.cumsum(a, axis=axis).take(-1, axis=axis)


# ---------------------------------------------------------------- elementwise

def elementwise(op_kind: str, a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, op_kind)
    x, y = a.data, b.data
    if op_kind == "add":
        return _result(x + y, (a, b), lambda g: (g, g))
    if op_kind == "sub":
        return _result(x - y, (a, b), lambda g: (g, -g))
    if op_kind == "mul":
        return _result(x * y, (a, b), lambda g: (g * y, g * x))
    if op_kind == "max":
        first = x >= y
        return _result(np.where(first, x, y), (a, b), lambda g: (g * first, g * ~first))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def maximum(a, b):
    return elementwise("max", a, b)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _result(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        return _result(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return _result(s, (x,), lambda g: (g * s * (1 - s),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x):
    return activation("relu", x)


def sigmoid(x):
    return activation("sigmoid", x)


# ----------------------------------------------------------------- structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return _result(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose expects rank 2, got {x.shape}")
    return _result(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Expand size-1 axes of ``x`` to ``shape``; ranks must already agree."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.ndim or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeMismatch(f"cannot broadcast {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _result(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True) if axes else g,))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat of nothing")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeMismatch(f"concat: incompatible shapes {ref} and {t.shape}")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeMismatch("stack of nothing")
    for t in tensors[1:]:
        _check_same(tensors[0], t, "stack")
    n = len(tensors)
    return _result(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def _axis(x: Tensor, axis: Optional[int]) -> Optional[int]:
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def _first_argmax_mask(a: np.ndarray, axis: int) -> np.ndarray:
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    mask = np.zeros(a.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=axis)
    return mask


def reduce(kind: str, x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Sum, mean or max over one axis (or everything when ``axis`` is None).

    Max routes its gradient to the first maximal element along the axis.
    """
    ax = _axis(x, axis)
    a = x.data if ax is not None else x.data.reshape(-1)
    red = 0 if ax is None else ax
    n = a.shape[red]
    if kind == "sum":
        out = _seqsum(a, red)
    elif kind == "mean":
        out = _seqsum(a, red) / n
    elif kind == "max":
        mask = _first_argmax_mask(a, red)
        out = np.max(a, axis=red)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    src = x.shape

    def vjp(g):
        ge = np.expand_dims(g, red)
        if kind == "sum":
            full = np.broadcast_to(ge, a.shape)
        elif kind == "mean":
            full = np.broadcast_to(ge / n, a.shape)
        else:
            full = ge * mask
        return (np.array(full).reshape(src),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), vjp)


def cumprod(x: Tensor) -> Tensor:
    """Running product along the last axis of a rank-2 tensor."""
    if x.ndim != 2:
        raise ShapeMismatch(f"cumprod expects rank 2, got {x.shape}")
    xd = x.data
    out = np.cumprod(xd, axis=1)

    def vjp(g):
        n, p = xd.shape
        gx = np.empty_like(xd)
        before = np.ones(n, dtype=xd.dtype)
        # d out_j / d x_q = prod_{k<q} x_k * prod_{q<k<=j} x_k; avoids dividing by x_q
        for q in range(p):
            after = np.ones((n, p - q), dtype=xd.dtype)
            if q + 1 < p:
                after[:, 1:] = np.cumprod(xd[:, q + 1:], axis=1)
            gx[:, q] = before * (g[:, q:] * after).sum(axis=1)
            before = before * xd[:, q]
        return (gx,)

    return _result(out, (x,), vjp)


# ---------------------------------------------------------------- volumetric

def _triple(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeMismatch(f"expected 3 spatial extents, got {v}")
    return v


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation with zero padding (no kernel flip)."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeMismatch(f"conv3d expects rank-5 input and weight, got {x.shape}, {weight.shape}")
    n, c, d, h, w = x.shape
    co, ci, kd, kh, kw = weight.shape
    if ci != c:
        raise ShapeMismatch(f"conv3d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeMismatch(f"conv3d: bias shape {bias.shape}, expected {(co,)}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    pd, ph, pw = d + 2 * padding, h + 2 * padding, w + 2 * padding
    if pd < kd or ph < kh or pw < kw:
        raise KernelTooLarge(f"kernel {(kd, kh, kw)} exceeds padded input {(pd, ph, pw)}")
    od, oh, ow = (pd - kd) // stride + 1, (ph - kh) // stride + 1, (pw - kw) // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    win = sliding_window_view(xd, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * od * oh * ow, c * kd * kh * kw)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, od, oh, ow, co).transpose(0, 4, 1, 2, 3))

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 4, 1).reshape(-1, co)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, od, oh, ow, c, kd, kh, kw)
            dcols = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
            gpad = np.zeros((n, c, pd, ph, pw), dtype=xd.dtype)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gpad[:, :, i:i + stride * od:stride, j:j + stride * oh:stride,
                             k:k + stride * ow:stride] += dcols[..., i, j, k]
            gx = gpad[:, :, padding:padding + d, padding:padding + h, padding:padding + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, vjp)


def pool3d(kind: str, x: Tensor, kernel, stride=None) -> Tensor:
    """Windowed max or mean over non-padded 3D windows."""
    if x.ndim != 5:
        raise ShapeMismatch(f"pool3d expects rank 5, got {x.shape}")
    k = _triple(kernel)
    s = _triple(stride if stride is not None else kernel)
    n, c = x.shape[:2]
    sp = x.shape[2:]
    if any(e < kk for e, kk in zip(sp, k)):
        raise KernelTooLarge(f"pool kernel {k} exceeds input {sp}")
    o = tuple((e - kk) // ss + 1 for e, kk, ss in zip(sp, k, s))
    win = sliding_window_view(x.data, k, axis=(2, 3, 4))[:, :, ::s[0], ::s[1], ::s[2]]
    flat = win.reshape(n, c, *o, -1)
    kk = flat.shape[-1]
    offsets = [(i, j, l) for i in range(k[0]) for j in range(k[1]) for l in range(k[2])]

    def _slices(i, j, l):
        return (slice(None), slice(None),
                slice(i, i + s[0] * o[0], s[0]),
                slice(j, j + s[1] * o[1], s[1]),
                slice(l, l + s[2] * o[2], s[2]))

    if kind == "max":
        arg = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def vjp(g):
            gx = np.zeros_like(x.data)
            for idx, off in enumerate(offsets):
                gx[_slices(*off)] += g * (arg == idx)
            return (gx,)
    elif kind == "avg":
        out = _seqsum(flat, -1) / kk

        def vjp(g):
            gx = np.zeros_like(x.data)
            share = g / kk
            for off in offsets:
                gx[_slices(*off)] += share
            return (gx,)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return _result(np.ascontiguousarray(out), (x,), vjp)


def global_pool(kind: str, x: Tensor) -> Tensor:
    """Per-channel max or mean over every spatial position: [N,C,...] -> [N,C]."""
    if x.ndim < 3:
        raise ShapeMismatch(f"global_pool expects [N,C,spatial...], got {x.shape}")
    n, c = x.shape[:2]
    flat = reshape(x, (n, c, int(np.prod(x.shape[2:]))))
    kind = "mean" if kind == "avg" else kind
    if kind not in ("max", "mean"):
        raise ValueError(f"unknown global pool kind {kind!r}")
    return reduce(kind, flat, axis=2)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
               mean: Optional[np.ndarray] = None, var: Optional[np.ndarray] = None):
    """Per-channel normalisation of a [N,C,...] tensor.

    With ``mean``/``var`` omitted the batch statistics are used (training);
    returns ``(out, batch_mean, batch_var)`` where the variance is biased.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch_norm: gamma/beta must have shape {(c,)}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    training = mean is None
    if training:
        mu = xd.mean(axis=axes)
        v = xd.var(axis=axes)
    else:
        mu, v = np.asarray(mean, dtype=xd.dtype), np.asarray(var, dtype=xd.dtype)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = xd.size // c

    def vjp(g):
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        gam = gamma.data.reshape(bshape)
        if training:
            gx = (gam * inv.reshape(bshape) / m) * (
                m * g - gb.reshape(bshape) - xhat * gg.reshape(bshape))
        else:
            gx = g * gam * inv.reshape(bshape)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), vjp), mu, v
