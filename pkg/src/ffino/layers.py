"""Spectral layers, the U-Net operator, and plain fully connected nets.

Three layer types make up the decoder: the factorized Fourier layer
(independent 1-D spectral mixing per spatial dimension, merged back in
physical space, wrapped in a feedforward with a residual connection),
the plain Fourier block, and the U-Fourier layer that adds a parallel
U-Net branch and a pointwise linear branch before the activation.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ComplexTensor, ShapeError, Tensor

_REAL = {"single": np.float32, "double": np.float64}
_CPLX = {"single": np.complex64, "double": np.complex128}


# ---------------------------------------------------------------------------
# initialized parameter helpers

def _uniform_param(rng: np.random.Generator, shape, bound: float, precision: str) -> Tensor:
    data = rng.uniform(-bound, bound, size=shape).astype(_REAL[precision])
    return Tensor(data, requires_grad=True)


def _spectral_param(rng: np.random.Generator, shape, scale: float, precision: str) -> ComplexTensor:
    re = rng.uniform(0.0, scale, size=shape)
    im = rng.uniform(0.0, scale, size=shape)
    return ComplexTensor((re + 1j * im).astype(_CPLX[precision]), requires_grad=True)


# ---------------------------------------------------------------------------
# complex channel mixing primitives

def _mix2d(X: ComplexTensor, w: ComplexTensor) -> ComplexTensor:
    """X[B,Ci,mr,mz] x w[mr,mz,Ci,Co] -> [B,Co,mr,mz], realized as a
    per-mode batched channel GEMM."""
    Xd, wd = X.data, w.data
    Xm = np.ascontiguousarray(Xd.transpose(2, 3, 0, 1))          # [mr,mz,B,Ci]
    out = np.matmul(Xm, wd).transpose(2, 3, 0, 1)                # -> [B,Co,mr,mz]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gm = np.ascontiguousarray(g.transpose(2, 3, 0, 1))       # [mr,mz,B,Co]
        gX = np.matmul(gm, np.conj(wd).transpose(0, 1, 3, 2)).transpose(2, 3, 0, 1)
        gw = np.matmul(np.conj(Xm).transpose(0, 1, 3, 2), gm)    # [mr,mz,Ci,Co]
        return np.ascontiguousarray(gX), gw

    return T.apply_op("spectral_mix2d", [X, w], out, bwd)


def _mix_axis(X: ComplexTensor, w: ComplexTensor, axis: int) -> ComplexTensor:
    """Per-mode channel mixing along one spatial axis.

    axis=2: X[B,Ci,m,W] x w[m,Ci,Co] -> [B,Co,m,W]
    axis=3: X[B,Ci,H,m] x w[m,Ci,Co] -> [B,Co,H,m]
    """
    if axis not in (2, 3):
        raise ShapeError("mix axis must be one of the two spatial axes (2 or 3)")
    Xd, wd = X.data, w.data
    other = 3 if axis == 2 else 2
    # move the mode axis in front, the untouched spatial axis into rows:
    # [m, other, B, Ci] @ [m, 1, Ci, Co] -> [m, other, B, Co]
    Xm = np.ascontiguousarray(Xd.transpose(axis, other, 0, 1))
    wb = wd[:, None]
    out = np.matmul(Xm, wb)
    out = np.ascontiguousarray(out.transpose(2, 3, 0, 1) if axis == 2
                               else out.transpose(2, 3, 1, 0))

    def bwd(g):
        gm = np.ascontiguousarray(g.transpose(axis, other, 0, 1))
        gX = np.matmul(gm, np.conj(wb).transpose(0, 1, 3, 2))
        gX = np.ascontiguousarray(gX.transpose(2, 3, 0, 1) if axis == 2
                                  else gX.transpose(2, 3, 1, 0))
        gw = np.matmul(np.conj(Xm).transpose(0, 1, 3, 2), gm).sum(axis=1)
        return gX, gw

    return T.apply_op("spectral_mix1d", [X, w], out, bwd)


# ---------------------------------------------------------------------------
# layers

class SpectralConv2d:
    """Kernel integral as a truncated 2-D spectral multiply.

    Transforms over both spatial axes, multiplies the lowest
    modes_r x modes_z block and its conjugate-symmetric counterpart
    block along the full-length axis by one complex weight tensor,
    zeroes every other mode, and transforms back.
    """

    def __init__(self, in_channels: int, out_channels: int, modes_r: int, modes_z: int,
                 grid: tuple[int, int], rng: np.random.Generator, precision: str = "single"):
        nr, nz = grid
        if modes_r < 1 or modes_r > nr // 2 + 1:
            raise ShapeError(f"modes_r={modes_r} exceeds capacity {nr // 2 + 1} of grid axis {nr}")
        if modes_z < 1 or modes_z > nz // 2 + 1:
            raise ShapeError(f"modes_z={modes_z} exceeds capacity {nz // 2 + 1} of grid axis {nz}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.modes_r = modes_r
        self.modes_z = modes_z
        self.grid = (nr, nz)
        scale = 1.0 / (in_channels * out_channels)
        self.weight = _spectral_param(
            rng, (modes_r, modes_z, in_channels, out_channels), scale, precision)

    def __call__(self, z: Tensor) -> Tensor:
        B, C, H, W = z.shape
        if C != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {C}")
        mr, mz = self.modes_r, self.modes_z
        Mw = W // 2 + 1
        X = T.cfft(T.rfft(z, axis=3), axis=2)            # [B,C,H,Mw]

        # retained rows: [0, mr) plus the conjugate-symmetric counterpart
        # rows (H-mr, H); the mirrored rows share the weight of their
        # positive-frequency partner so truncation stays a projection
        hi_len = min(mr - 1, H - 1)
        hi_start = H - hi_len
        low = min(mr, hi_start)
        pieces = []
        if low > 0:
            blk = T.cnarrow(T.cnarrow(X, 2, 0, low), 3, 0, mz)
            w_low = self.weight if low == mr else T.cnarrow(self.weight, 0, 0, low)
            pieces.append(_embed(_mix2d(blk, w_low), H, Mw, row_start=0))
        if hi_len > 0:
            blk_hi = T.cnarrow(T.cnarrow(X, 2, hi_start, hi_len), 3, 0, mz)
            # row H-k pairs with mode k, so the weight rows run in reverse
            w_hi = T.cflip(T.cnarrow(self.weight, 0, mr - hi_len, hi_len), 0)
            pieces.append(_embed(_mix2d(blk_hi, w_hi), H, Mw, row_start=hi_start))

        out_ft = pieces[0]
        for p in pieces[1:]:
            out_ft = T.cadd(out_ft, p)
        return T.irfft(T.cifft(out_ft, axis=2), axis=3, length=W)

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight)]


def _embed(mixed: ComplexTensor, H: int, Mw: int, row_start: int) -> ComplexTensor:
    rows, cols = mixed.shape[2], mixed.shape[3]
    out = T.cpad(mixed, 2, row_start, H - row_start - rows)
    return T.cpad(out, 3, 0, Mw - cols)


class FactorizedSpectralConv:
    """Kernel integral factorized over spatial dimensions: each dimension
    is processed independently in Fourier space (1-D transform, per-mode
    channel mixing on the lowest modes) and the branch results are merged
    again by summation in physical space."""

    def __init__(self, in_channels: int, out_channels: int, modes_r: int, modes_z: int,
                 grid: tuple[int, int], rng: np.random.Generator, precision: str = "single"):
        nr, nz = grid
        if modes_r < 1 or modes_r > nr // 2 + 1:
            raise ShapeError(f"modes_r={modes_r} exceeds capacity {nr // 2 + 1} of grid axis {nr}")
        if modes_z < 1 or modes_z > nz // 2 + 1:
            raise ShapeError(f"modes_z={modes_z} exceeds capacity {nz // 2 + 1} of grid axis {nz}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.modes_r = modes_r
        self.modes_z = modes_z
        self.grid = (nr, nz)
        scale = 1.0 / (in_channels * out_channels)
        self.weight_r = _spectral_param(rng, (modes_r, in_channels, out_channels), scale, precision)
        self.weight_z = _spectral_param(rng, (modes_z, in_channels, out_channels), scale, precision)

    def __call__(self, z: Tensor) -> Tensor:
        B, C, H, W = z.shape
        if C != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {C}")
        Mr, Mw = H // 2 + 1, W // 2 + 1

        Xr = T.rfft(z, axis=2)                                    # [B,C,Mr,W]
        Yr = _mix_axis(T.cnarrow(Xr, 2, 0, self.modes_r), self.weight_r, axis=2)
        out_r = T.irfft(T.cpad(Yr, 2, 0, Mr - self.modes_r), axis=2, length=H)

        Xz = T.rfft(z, axis=3)                                    # [B,C,H,Mw]
        Yz = _mix_axis(T.cnarrow(Xz, 3, 0, self.modes_z), self.weight_z, axis=3)
        out_z = T.irfft(T.cpad(Yz, 3, 0, Mw - self.modes_z), axis=3, length=W)

        return T.add(out_r, out_z)

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight_r", self.weight_r), (f"{prefix}.weight_z", self.weight_z)]


class Conv2dLayer:
    """Plain conv2d with owned weight and bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, precision: str = "single",
                 stride: int = 1, padding: str = "same"):
        bound = 1.0 / np.sqrt(in_channels * kernel * kernel)
        self.weight = _uniform_param(rng, (out_channels, in_channels, kernel, kernel),
                                     bound, precision)
        self.bias = _uniform_param(rng, (out_channels,), bound, precision)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding, stride=self.stride)

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class FeedForward:
    """Two pointwise convolutions around a ReLU, as used inside the
    factorized Fourier layer. ``expansion`` widens the hidden channels."""

    def __init__(self, channels: int, rng: np.random.Generator, precision: str = "single",
                 expansion: int = 1):
        hidden = expansion * channels
        self.w1 = Conv2dLayer(channels, hidden, 1, rng, precision)
        self.w2 = Conv2dLayer(hidden, channels, 1, rng, precision)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(T.relu(self.w1(x)))

    def named_params(self, prefix: str):
        return self.w1.named_params(f"{prefix}.w1") + self.w2.named_params(f"{prefix}.w2")


class UNet:
    """Shape-preserving U-Net: stride-2 conv encoder, bottleneck, nearest
    upsampling with skip concatenation fused by 1x1 convs, final 3x3 conv.

    Channel count is preserved end to end; spatial dims must be divisible
    by 2^depth. Depth 0 degenerates to a two-conv stack.
    """

    def __init__(self, channels: int, depth: int, rng: np.random.Generator,
                 precision: str = "single"):
        self.channels = channels
        self.depth = depth
        self.encoders = [Conv2dLayer(channels, channels, 3, rng, precision, stride=2)
                         for _ in range(depth)]
        self.bottleneck = Conv2dLayer(channels, channels, 3, rng, precision)
        self.fusers = [Conv2dLayer(2 * channels, channels, 1, rng, precision)
                       for _ in range(depth)]
        self.final = Conv2dLayer(channels, channels, 3, rng, precision)

    def __call__(self, z: Tensor) -> Tensor:
        B, C, H, W = z.shape
        div = 1 << self.depth
        if H % div or W % div:
            raise ShapeError(
                f"U-Net depth {self.depth} needs spatial dims divisible by {div}, got ({H},{W})")
        skips = []
        h = z
        for enc in self.encoders:
            skips.append(h)
            h = T.relu(enc(h))
        h = T.relu(self.bottleneck(h))
        for lvl in reversed(range(self.depth)):
            h = T.upsample_nearest2x(h)
            h = T.relu(self.fusers[lvl](T.concat([h, skips[lvl]], axis=1)))
        return self.final(h)

    def named_params(self, prefix: str):
        out = []
        for i, enc in enumerate(self.encoders):
            out += enc.named_params(f"{prefix}.enc{i}")
        out += self.bottleneck.named_params(f"{prefix}.bottleneck")
        for i, fuse in enumerate(self.fusers):
            out += fuse.named_params(f"{prefix}.fuse{i}")
        out += self.final.named_params(f"{prefix}.final")
        return out


class FFourierLayer:
    """z + sigma(W2 sigma(W1 K(z) + b1) + b2), K factorized per dimension.

    With all parameters zero this is the identity map."""

    def __init__(self, width: int, modes_r: int, modes_z: int, grid: tuple[int, int],
                 rng: np.random.Generator, precision: str = "single", ff_expansion: int = 1):
        self.width = width
        self.kernel = FactorizedSpectralConv(width, width, modes_r, modes_z, grid, rng, precision)
        self.ff = FeedForward(width, rng, precision, expansion=ff_expansion)

    def __call__(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.width:
            raise ShapeError(f"layer width {self.width}, input channels {z.shape[1]}")
        return T.add(z, T.relu(self.ff.w2(T.relu(self.ff.w1(self.kernel(z))))))

    def named_params(self, prefix: str):
        return self.kernel.named_params(f"{prefix}.kernel") + self.ff.named_params(f"{prefix}.ff")


class UFourierLayer:
    """sigma(K(z) + U(z) + W z + b) with a 2-D spectral kernel, a U-Net
    branch, and a pointwise linear branch carrying the bias."""

    def __init__(self, width: int, modes_r: int, modes_z: int, grid: tuple[int, int],
                 rng: np.random.Generator, precision: str = "single", unet_depth: int = 2):
        self.width = width
        self.kernel = SpectralConv2d(width, width, modes_r, modes_z, grid, rng, precision)
        self.unet = UNet(width, unet_depth, rng, precision)
        self.w = Conv2dLayer(width, width, 1, rng, precision)

    def __call__(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.width:
            raise ShapeError(f"layer width {self.width}, input channels {z.shape[1]}")
        return T.relu(T.add(T.add(self.kernel(z), self.unet(z)), self.w(z)))

    def named_params(self, prefix: str):
        return (self.kernel.named_params(f"{prefix}.kernel")
                + self.unet.named_params(f"{prefix}.unet")
                + self.w.named_params(f"{prefix}.w"))


class Fnn:
    """Fully connected net: affine + ReLU per hidden layer, bare final affine."""

    def __init__(self, widths: list[int], rng: np.random.Generator, precision: str = "single"):
        if len(widths) < 2:
            raise ShapeError("an FNN needs at least input and output widths")
        self.widths = list(widths)
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(d_in)
            self.weights.append(_uniform_param(rng, (d_in, d_out), bound, precision))
            self.biases.append(_uniform_param(rng, (d_out,), bound, precision))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"FNN expects trailing dim {self.widths[0]}, got {x.shape[-1]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.add(T.matmul(h, w), b)
            if i != last:
                h = T.relu(h)
        return h

    def named_params(self, prefix: str):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{prefix}.w{i}", w), (f"{prefix}.b{i}", b)]
        return out
