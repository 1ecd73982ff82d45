"""Dense tensors with define-by-run reverse-mode autodiff and Adam.

Operations executed while a :class:`Tape` is active are recorded in order;
:func:`backward` replays the records in reverse to populate ``.grad`` on
leaf tensors.  Arrays are float32 by default; float64 tensors flow through
every op unchanged, which is how the finite-difference checks run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

# name -> op callable; every entry must carry a finite-difference test
REGISTRY: dict[str, Callable] = {}


def register_op(name: str):
    def wrap(fn):
        REGISTRY[name] = fn
        return fn
    return wrap


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_produced")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# --- tape -----------------------------------------------------------------

@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of executed differentiable operations."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()

    def __len__(self):
        return len(self.records)


_ACTIVE: list[Tape] = []


def _emit(inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        _ACTIVE[-1].records.append(_Record(inputs, out, vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires-grad leaf recorded on ``tape``.

    Leaves recorded on the tape but not reachable from ``loss`` get zeros.
    Existing leaf gradients are overwritten, not accumulated.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        for t in rec.inputs:
            if t.requires_grad and not t._produced:
                leaves[id(t)] = t
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
    if not loss._produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)


# --- elementwise ------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _dtype_of(*xs: Tensor):
    return np.result_type(*(x.dtype for x in xs))


@register_op("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    dt = _dtype_of(a, b)
    out = (a.data + b.data).astype(dt, copy=False)
    return _emit((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


@register_op("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    dt = _dtype_of(a, b)
    out = (a.data - b.data).astype(dt, copy=False)
    return _emit((a, b), out, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


@register_op("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    dt = _dtype_of(a, b)
    out = (a.data * b.data).astype(dt, copy=False)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit((a, b), out, vjp)


@register_op("neg")
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit((a,), -a.data, lambda g: (-g,))


@register_op("square")
def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit((a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


@register_op("silu")
def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = expit(a.data)
    out = a.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _emit((a,), out.astype(a.dtype, copy=False), vjp)


@register_op("identity")
def identity(a) -> Tensor:
    a = as_tensor(a)
    return _emit((a,), a.data.copy(), lambda g: (g,))


# --- reductions and shape ----------------------------------------------------

@register_op("sum")
def sum_(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _emit((a,), out, lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


@register_op("mean")
def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    return _emit((a,), out, lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


@register_op("reshape")
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit((a,), a.data.reshape(shape).copy(), lambda g: (g.reshape(a.shape),))


@register_op("concat")
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(np.take(g, range(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(ts)))

    return _emit(ts, out, vjp)


@register_op("slice_batch")
def slice_batch(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _emit((a,), a.data[start:stop].copy(), vjp)


# --- convolution and resampling ----------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d output size ({size} + 2*{pad} - {k})/{stride} + 1 is not a positive integer")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh, kw, stride, ho, wo) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros(shape, dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += cols[:, :, a, b]
    return xp


@register_op("conv2d")
def conv2d(x, kernel, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """Batched 2-D cross-correlation, ``x[N,Cin,H,W] * kernel[Cout,Cin,kh,kw] + bias``."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} has {cin} channels, "
                         f"kernel {kernel.shape} expects {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel sizes must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    dt = _dtype_of(x, kernel, bias)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xp = xp.astype(dt, copy=False)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(cout, -1).astype(dt, copy=False)
    out = np.matmul(wmat, cols) + bias.data.astype(dt)[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def vjp(g):
        g = g.reshape(n, cout, ho * wo)
        gx = gk = gb = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            gx = np.ascontiguousarray(gx)
        if kernel.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gk, gb

    return _emit((x, kernel, bias), out, vjp)


@register_op("resample2")
def resample2(x, direction: str) -> Tensor:
    """Factor-2 average-pool (``down``) or nearest-neighbour duplication (``up``)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"resample2 expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if direction == "down":
        if h % 2 or w % 2:
            raise ShapeError(f"resample2 down needs even spatial size, got {h}x{w}")
        d = x.data
        # pairwise sums keep up-then-down exact
        out = ((d[:, :, 0::2, 0::2] + d[:, :, 0::2, 1::2])
               + (d[:, :, 1::2, 0::2] + d[:, :, 1::2, 1::2])) * x.dtype.type(0.25)

        def vjp(g):
            q = g * g.dtype.type(0.25)
            return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

        return _emit((x,), out, vjp)
    if direction == "up":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def vjp(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _emit((x,), out, vjp)
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


# --- losses ----------------------------------------------------------------

def mse(a, b) -> Tensor:
    return mean(square(sub(a, b)))


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], 0)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              decay: float = 1.0, steps_per_epoch: int = 1):
    """One bias-corrected Adam update in place, then multiplicative decay.

    Parameters are scaled by ``decay ** (1 / steps_per_epoch)`` after the
    update, so ``decay`` is the per-epoch shrink factor.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"adam_step shape mismatch: param {p.shape}, grad {np.shape(g)}, "
                             f"moment {m.shape}")
    state.step_count += 1
    k = state.step_count
    c1 = 1.0 - beta1 ** k
    c2 = 1.0 - beta2 ** k
    shrink = decay ** (1.0 / steps_per_epoch) if decay != 1.0 else 1.0
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=p.dtype)
        m = beta1 * state.first_moment[i] + (1.0 - beta1) * g
        v = beta2 * state.second_moment[i] + (1.0 - beta2) * (g * g)
        state.first_moment[i] = m.astype(p.dtype, copy=False)
        state.second_moment[i] = v.astype(p.dtype, copy=False)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new = p.data - upd.astype(p.dtype, copy=False)
        if shrink != 1.0:
            new = new * p.dtype.type(shrink)
        p.data = new.astype(p.dtype, copy=False)
    return params, state
