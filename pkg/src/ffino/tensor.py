"""Dense tensors with reverse-mode autodiff and real FFTs.

Everything downstream (spectral layers, the operator model, the training
loop) is built on the primitives here: real tensors, complex tensors
produced by FFT ops, and a tape of primitive operations that is replayed
in reverse topological order by ``backward``.

Arrays are numpy; FFTs go through scipy.fft (pocketfft). Two precision
modes exist: "single" for training, "double" for gradient checks and
oracle tests. Mixing precisions inside one graph is an error.
"""
from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.fft as _sfft

__all__ = [
    "Tensor",
    "ComplexTensor",
    "TapeNode",
    "ShapeError",
    "PrecisionError",
    "no_grad",
    "set_fft_workers",
    "tensor",
    "zeros",
    "ones",
    "full",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "relu",
    "tsum",
    "mean",
    "reshape",
    "narrow",
    "concat",
    "broadcast_to",
    "power",
    "sqrt",
    "upsample_nearest2x",
    "rfft",
    "irfft",
    "cfft",
    "cifft",
    "cnarrow",
    "cpad",
    "cflip",
    "cadd",
    "apply_op",
    "zero_grads",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class PrecisionError(ValueError):
    """Raised when tensors of different precision meet in one graph."""


_REAL_DTYPES = {"single": np.float32, "double": np.float64}
_COMPLEX_DTYPES = {"single": np.complex64, "double": np.complex128}
_PRECISION_OF = {
    np.dtype(np.float32): "single",
    np.dtype(np.float64): "double",
    np.dtype(np.complex64): "single",
    np.dtype(np.complex128): "double",
}

_fft_workers = 1
_grad_enabled = threading.local()


def set_fft_workers(n: int) -> None:
    """Set worker-thread count for scipy FFT calls (results are bit-identical
    for any worker count; this only affects speed)."""
    global _fft_workers
    _fft_workers = max(1, int(n))


class no_grad:
    """Context manager disabling tape recording inside the block."""

    def __enter__(self):
        self._prev = getattr(_grad_enabled, "on", True)
        _grad_enabled.on = False
        return self

    def __exit__(self, *exc):
        _grad_enabled.on = self._prev
        return False


def _recording() -> bool:
    return getattr(_grad_enabled, "on", True)


class TapeNode:
    """One primitive op on the tape: parent tensors plus the adjoint rule.

    ``backward`` maps the output cotangent to one cotangent per input
    (None for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class _BaseTensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 node: TapeNode | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> str:
        return _PRECISION_OF[self.data.dtype]

    def _tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return self.data.reshape(()).item()

    def __repr__(self):
        cls = type(self).__name__
        return f"{cls}(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"


class Tensor(_BaseTensor):
    """Dense real tensor. Row-major values, single or double precision."""

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None,
                 node: TapeNode | None = None):
        arr = np.asarray(data)
        if precision is not None:
            arr = arr.astype(_REAL_DTYPES[precision])
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        super().__init__(arr, requires_grad, node)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, precision: str) -> "Tensor":
        return Tensor(self.data.astype(_REAL_DTYPES[precision]), requires_grad=self.requires_grad)

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_affine(self, 1.0, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_affine(self, 1.0, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_affine(self, float(other), 0.0)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_affine(self, 1.0 / float(other), 0.0)
        return div(self, other)

    def __neg__(self):
        return _scalar_affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


class ComplexTensor(_BaseTensor):
    """Complex tensor: interleaved real/imaginary pairs in memory.

    Produced only by FFT ops and complex arithmetic, except when created
    directly as a learnable parameter (spectral weights).
    """

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None,
                 node: TapeNode | None = None):
        arr = np.asarray(data)
        if precision is not None:
            arr = arr.astype(_COMPLEX_DTYPES[precision])
        elif arr.dtype not in (np.complex64, np.complex128):
            arr = arr.astype(np.complex128)
        super().__init__(arr, requires_grad, node)

    def detach(self) -> "ComplexTensor":
        return ComplexTensor(self.data)

    def backward(self) -> None:
        raise ShapeError("backward starts from a real scalar loss, not a complex tensor")


def _precision_check(*tensors: _BaseTensor) -> str:
    precs = {t.precision for t in tensors}
    if len(precs) > 1:
        raise PrecisionError(f"mixed precisions in one graph: {sorted(precs)}")
    return precs.pop()


def _make(out_data: np.ndarray, op: str, inputs: tuple, backward_fn: Callable):
    cls = ComplexTensor if np.iscomplexobj(out_data) else Tensor
    if _recording() and any(t._tracked() for t in inputs):
        return cls(out_data, node=TapeNode(op, inputs, backward_fn))
    return cls(out_data)


def apply_op(op: str, inputs: Sequence[_BaseTensor], out_data: np.ndarray,
             backward_fn: Callable):
    """Register a custom primitive: backward_fn(out_grad) returns one
    cotangent array (or None) per input. Lets higher layers define fused
    ops on the same tape."""
    _precision_check(*inputs)
    return _make(out_data, op, tuple(inputs), backward_fn)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Every ``requires_grad`` leaf reachable from ``loss`` receives its
    gradient in ``.grad``; repeated calls accumulate additively until
    ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss.node is None and not loss.requires_grad:
        raise ShapeError("loss has no tape: nothing requires a gradient")

    topo: list[_BaseTensor] = []
    seen: set[int] = set()
    stack: list[tuple[_BaseTensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.inputs:
                if id(p) not in seen and p._tracked():
                    stack.append((p, False))

    cotangent: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = cotangent.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad = t.grad + g
        if t.node is None:
            continue
        grads = t.node.backward(g)
        for parent, pg in zip(t.node.inputs, grads):
            if pg is None or not parent._tracked():
                continue
            acc = cotangent.get(id(parent))
            cotangent[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params: Iterable[_BaseTensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# constructors

def tensor(data, requires_grad: bool = False, precision: str = "double") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, precision=precision)


def zeros(shape, precision: str = "double", requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_REAL_DTYPES[precision]), requires_grad=requires_grad)


def ones(shape, precision: str = "double", requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_REAL_DTYPES[precision]), requires_grad=requires_grad)


def full(shape, value: float, precision: str = "double") -> Tensor:
    return Tensor(np.full(shape, value, dtype=_REAL_DTYPES[precision]))


# ---------------------------------------------------------------------------
# elementwise ops with trailing-axis broadcasting (b broadcasts up to a)

def _broadcast_ok(a_shape: tuple, b_shape: tuple) -> bool:
    if len(b_shape) > len(a_shape):
        return False
    for da, db in zip(a_shape[len(a_shape) - len(b_shape):], b_shape):
        if db != da and db != 1:
            return False
    return True


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (dg, ds) in enumerate(zip(g.shape, shape)) if ds == 1 and dg != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _elementwise(op: str, a: Tensor, b: Tensor):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError(f"{op} expects real tensors")
    _precision_check(a, b)
    if a.shape != b.shape and not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(
            f"{op}: shape {b.shape} does not broadcast onto {a.shape} by trailing-axis rules")
    if op == "add":
        out = a.data + b.data
    elif op == "sub":
        out = a.data - b.data
    elif op == "mul":
        out = a.data * b.data
    elif op == "div":
        out = a.data / b.data
    else:
        raise ValueError(op)

    ad, bd = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    def bwd(g):
        if op == "add":
            ga, gb = g, g
        elif op == "sub":
            ga, gb = g, -g
        elif op == "mul":
            ga, gb = g * bd, g * ad
        else:
            ga = g / bd
            gb = -g * ad / (bd * bd)
        if ga.shape != a_shape:
            ga = _reduce_to_shape(ga, a_shape)
        if gb.shape != b_shape:
            gb = _reduce_to_shape(gb, b_shape)
        return ga, gb

    return _make(out, op, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("mul", a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("div", a, b)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch by name; kept as the generic entry point for {add, sub, mul}."""
    return _elementwise(op, a, b)


def _scalar_affine(x: Tensor, scale: float, shift: float) -> Tensor:
    out = x.data * scale + shift if shift else x.data * scale

    def bwd(g):
        return (g * scale,)

    return _make(out, "scalar_affine", (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched a[..,M,K] @ b[K,N]; leading axes of a are batch axes."""
    _precision_check(a, b)
    if a.ndim < 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects a[..,M,K] and b[K,N], got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, "matmul", (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution

_COLS_CACHE_LIMIT = 64 * 1024 * 1024  # bytes; above this, recompute in backward


def _conv_geometry(H, W, kh, kw, stride, padding):
    if padding == "same":
        ph0, ph1 = (kh - 1) // 2, kh - 1 - (kh - 1) // 2
        pw0, pw1 = (kw - 1) // 2, kw - 1 - (kw - 1) // 2
    elif padding == "valid":
        ph0 = ph1 = pw0 = pw1 = 0
    else:
        raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")
    Hp, Wp = H + ph0 + ph1, W + pw0 + pw1
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel ({kh},{kw}) larger than padded input ({Hp},{Wp})")
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    return ph0, ph1, pw0, pw1, OH, OW


def _im2cols(xp: np.ndarray, kh, kw, stride, OH, OW):
    """Channel-block column matrix [(kh*kw)*C, B*OH*OW] built from cheap
    per-tap transposed copies (fast path on bandwidth-limited hosts)."""
    B, C = xp.shape[0], xp.shape[1]
    cols = np.empty((kh * kw, C, B, OH * OW), dtype=xp.dtype)
    t = 0
    for i in range(kh):
        for j in range(kw):
            sh = xp[:, :, i:i + stride * (OH - 1) + 1:stride,
                    j:j + stride * (OW - 1) + 1:stride]
            np.copyto(cols[t], sh.transpose(1, 0, 2, 3).reshape(C, B, OH * OW))
            t += 1
    return cols.reshape(kh * kw * C, B * OH * OW)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    """Cross-correlation of x[B,Cin,H,W] with w[Cout,Cin,kh,kw] plus bias.

    'same' padding preserves H,W at stride 1; general stride s yields
    ceil(H/s) by ceil(W/s).
    """
    _precision_check(x, w, b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x[B,C,H,W], w[Co,Ci,kh,kw]; got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d channel mismatch: input {C} vs kernel {Ci}")
    if b.shape != (Co,):
        raise ShapeError(f"conv2d bias must have shape ({Co},), got {b.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if kh == 1 and kw == 1 and stride == 1:
        return _conv2d_pointwise(x, w, b)
    ph0, ph1, pw0, pw1, OH, OW = _conv_geometry(H, W, kh, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    cols = _im2cols(xp, kh, kw, stride, OH, OW)
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1).reshape(Co, kh * kw * C))
    out = (w2 @ cols).reshape(Co, B, OH, OW).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out) + b.data[None, :, None, None]

    saved_cols = cols if cols.nbytes <= _COLS_CACHE_LIMIT else None
    xd = x.data

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3).reshape(Co, B * OH * OW))
        cols_b = saved_cols
        if cols_b is None:
            xpb = np.pad(xd, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
            cols_b = _im2cols(xpb, kh, kw, stride, OH, OW)
        gw = (g2 @ cols_b.T).reshape(Co, kh, kw, C).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (w2.T @ g2).reshape(kh * kw, C, B, OH, OW)
        gxp = np.zeros_like(xd, shape=(B, C, H + ph0 + ph1, W + pw0 + pw1))
        t = 0
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (OH - 1) + 1:stride,
                    j:j + stride * (OW - 1) + 1:stride] += gcols[t].transpose(1, 0, 2, 3)
                t += 1
        gx = gxp[:, :, ph0:ph0 + H, pw0:pw0 + W]
        return np.ascontiguousarray(gx), gw, gb

    return _make(out, "conv2d", (x, w, b), bwd)


def _conv2d_pointwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 stride-1 convolution as a batched channel GEMM (no im2col)."""
    B, C, H, W = x.shape
    Co = w.shape[0]
    w2 = w.data.reshape(Co, C)
    out = np.matmul(w2, x.data.reshape(B, C, H * W)).reshape(B, Co, H, W)
    out = out + b.data[None, :, None, None]
    xd = x.data

    def bwd(g):
        g3 = g.reshape(B, Co, H * W)
        gx = np.matmul(w2.T, g3).reshape(B, C, H, W)
        x3 = xd.reshape(B, C, H * W)
        gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(Co, C, 1, 1)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _make(out, "conv2d_1x1", (x, w, b), bwd)


# ---------------------------------------------------------------------------
# shape / reduction ops

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (out > 0),)

    return _make(out, "relu", (x,), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(x.data.dtype, copy=True),)
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        gg = g
        if not keepdims:
            for a in sorted(a % len(shape) for a in ax):
                gg = np.expand_dims(gg, a)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in ax]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _make(out, "reshape", (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; adjoint zero-pads back."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _make(out, "narrow", (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _precision_check(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(out, "concat", tuple(tensors), bwd)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.ndim != len(shape):
        raise ShapeError(f"broadcast_to needs equal ndim; reshape first ({x.shape} -> {shape})")
    for ds, dt in zip(x.shape, shape):
        if ds != dt and ds != 1:
            raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    out = np.broadcast_to(x.data, shape).copy()
    orig = x.shape

    def bwd(g):
        axes = tuple(i for i, (ds, dt) in enumerate(zip(orig, shape)) if ds == 1 and dt != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make(out, "broadcast_to", (x,), bwd)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    xd = x.data

    def bwd(g):
        return (g * p * xd ** (p - 1.0),)

    return _make(out, "power", (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _make(out, "sqrt", (x,), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the trailing two axes."""
    B, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None],
                          (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W).copy()

    def bwd(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(out, "upsample_nearest2x", (x,), bwd)


# ---------------------------------------------------------------------------
# FFT ops (unnormalized forward; inverse divides by length)

def _half_bin_weights(n: int, m: int, dtype) -> np.ndarray:
    """Conjugate-symmetry multiplicities of the half spectrum of a length-n
    real signal: DC once, interior bins twice, Nyquist once for even n."""
    w = np.full(m, 2.0, dtype=dtype)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


def rfft(x: Tensor, axis: int) -> ComplexTensor:
    """Real FFT along one axis, keeping the non-negative-frequency half."""
    if not isinstance(x, Tensor):
        raise TypeError("rfft expects a real tensor")
    n = x.shape[axis]
    if n == 0:
        raise ShapeError("rfft over a zero-length axis")
    out = _sfft.rfft(x.data, axis=axis, workers=_fft_workers)
    m = out.shape[axis]
    wshape = [1] * out.ndim
    wshape[axis] = m

    def bwd(g):
        # target adjoint: Re(sum_k G_k e^{+2pi i k n/N}); realized through an
        # irfft whose built-in conjugate-pair doubling is divided back out
        w = (1.0 / _half_bin_weights(n, m, np.float64)).reshape(wshape)
        gx = _sfft.irfft(g * w, n=n, axis=axis, workers=_fft_workers) * n
        return (gx.astype(x.data.dtype, copy=False),)

    return _make(out, "rfft", (x,), bwd)


def irfft(X: ComplexTensor, axis: int, length: int) -> Tensor:
    """Inverse of rfft: back to a real signal of the given length."""
    if not isinstance(X, ComplexTensor):
        raise TypeError("irfft expects a complex tensor")
    m = X.shape[axis]
    if m != length // 2 + 1:
        raise ShapeError(
            f"irfft: spectrum has {m} bins along axis {axis}, "
            f"but length {length} needs {length // 2 + 1}")
    out = _sfft.irfft(X.data, n=length, axis=axis, workers=_fft_workers)
    wshape = [1] * X.ndim
    wshape[axis] = m
    cdtype = X.data.dtype

    def bwd(g):
        w = (_half_bin_weights(length, m, np.float64) / length).reshape(wshape)
        gX = _sfft.rfft(g, axis=axis, workers=_fft_workers) * w
        return (gX.astype(cdtype, copy=False),)

    return _make(out, "irfft", (X,), bwd)


def cfft(X: ComplexTensor, axis: int) -> ComplexTensor:
    """Full complex FFT along one axis (unnormalized)."""
    n = X.shape[axis]
    out = _sfft.fft(X.data, axis=axis, workers=_fft_workers)

    def bwd(g):
        return (_sfft.ifft(g, axis=axis, workers=_fft_workers) * n,)

    return _make(out, "cfft", (X,), bwd)


def cifft(X: ComplexTensor, axis: int) -> ComplexTensor:
    """Full complex inverse FFT along one axis (divides by length)."""
    n = X.shape[axis]
    out = _sfft.ifft(X.data, axis=axis, workers=_fft_workers)

    def bwd(g):
        return (_sfft.fft(g, axis=axis, workers=_fft_workers) / n,)

    return _make(out, "cifft", (X,), bwd)


def cnarrow(X: ComplexTensor, axis: int, start: int, length: int) -> ComplexTensor:
    idx = [slice(None)] * X.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(X.data[idx])
    shape = X.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _make(out, "cnarrow", (X,), bwd)


def cpad(X: ComplexTensor, axis: int, before: int, after: int) -> ComplexTensor:
    """Zero-pad a complex tensor along one axis (adjoint of cnarrow)."""
    pads = [(0, 0)] * X.ndim
    pads[axis] = (before, after)
    out = np.pad(X.data, pads)
    n = X.shape[axis]
    idx = [slice(None)] * X.ndim
    idx[axis] = slice(before, before + n)
    idx = tuple(idx)

    def bwd(g):
        return (np.ascontiguousarray(g[idx]),)

    return _make(out, "cpad", (X,), bwd)


def cflip(X: ComplexTensor, axis: int) -> ComplexTensor:
    """Reverse a complex tensor along one axis (self-adjoint)."""
    out = np.ascontiguousarray(np.flip(X.data, axis=axis))

    def bwd(g):
        return (np.ascontiguousarray(np.flip(g, axis=axis)),)

    return _make(out, "cflip", (X,), bwd)


def cadd(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    _precision_check(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"cadd shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        return g, g

    return _make(out, "cadd", (a, b), bwd)
