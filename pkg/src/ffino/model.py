"""The full operator model: two branch nets and a trunk net joined by
point-wise mergers (sum over branches, product with the trunk), feeding
a decoder stack of factorized-Fourier and U-Fourier layers between
channel projections.

Also owns input featurization/normalization and the checkpoint format.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import layers as L
from .datagen import (FIELD_RANGES, SCALAR_RANGES, DataFormatError, Grid, Sample)
from .tensor import ShapeError, Tensor

__all__ = [
    "ModelConfig",
    "FfinoModel",
    "analytic_param_count",
    "save_checkpoint",
    "load_checkpoint",
    "spatial_features",
    "scalar_features",
    "time_features",
]


@dataclass(frozen=True)
class ModelConfig:
    width: int = 36
    modes_r: int = 32
    modes_z: int = 17
    n_f_fourier: int = 3
    m_u_fourier: int = 3
    decoder_preset: str = "ffino"            # ffino | fmionet_like | custom
    custom_decoder: tuple[str, ...] = ()     # entries "f" or "u" when preset=custom
    projection_width: int = 128
    spatial_in_channels: int = 5
    scalar_in_dim: int = 7
    trunk_in_dim: int = 1
    branch_hidden: tuple[int, ...] = (64, 64)
    grid_nr: int = 192
    grid_nz: int = 64
    unet_depth: int = 2
    ff_expansion: int = 1
    target: str = "sg"                       # sg | dp (eval-time clamping only)

    def __post_init__(self):
        if self.width <= 0 or self.projection_width <= 0:
            raise ValueError("widths must be positive")
        if self.decoder_preset not in ("ffino", "fmionet_like", "custom"):
            raise ValueError(f"unknown decoder preset {self.decoder_preset!r}")
        if self.target not in ("sg", "dp"):
            raise ValueError(f"target must be 'sg' or 'dp', got {self.target!r}")
        if not self.decoder_layers():
            raise ValueError("decoder layer list is empty")
        for kind in self.decoder_layers():
            if kind not in ("f", "u"):
                raise ValueError(f"decoder layers must be 'f' or 'u', got {kind!r}")

    def decoder_layers(self) -> tuple[str, ...]:
        if self.decoder_preset == "ffino":
            return ("f",) * self.n_f_fourier + ("u",) * self.m_u_fourier
        if self.decoder_preset == "fmionet_like":
            return ("u",) * (self.n_f_fourier + self.m_u_fourier)
        return tuple(self.custom_decoder)

    @property
    def grid(self) -> tuple[int, int]:
        return (self.grid_nr, self.grid_nz)


class FfinoModel:
    """Encoder (branch/trunk nets + mergers) plus spectral decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0, precision: str = "single"):
        self.config = config
        self.precision = precision
        rng = np.random.default_rng(seed)
        W = config.width
        grid = config.grid

        self.branch1 = L.Conv2dLayer(config.spatial_in_channels, W, 1, rng, precision)
        self.branch2 = L.Fnn([config.scalar_in_dim, *config.branch_hidden, W], rng, precision)
        self.trunk = L.Fnn([config.trunk_in_dim, *config.branch_hidden, W], rng, precision)
        # start the multiplicative trunk gate near identity so branch
        # gradients flow from the first step
        self.trunk.biases[-1].data[...] = 1.0
        self.proj1 = L.Conv2dLayer(W, W, 1, rng, precision)
        self.decoder = []
        for kind in config.decoder_layers():
            if kind == "f":
                self.decoder.append(L.FFourierLayer(W, config.modes_r, config.modes_z,
                                                    grid, rng, precision,
                                                    ff_expansion=config.ff_expansion))
            else:
                self.decoder.append(L.UFourierLayer(W, config.modes_r, config.modes_z,
                                                    grid, rng, precision,
                                                    unet_depth=config.unet_depth))
        self.proj2 = L.Conv2dLayer(W, config.projection_width, 1, rng, precision)
        self.proj3 = L.Conv2dLayer(config.projection_width, 1, 1, rng, precision)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, T._BaseTensor]]:
        out = []
        out += self.branch1.named_params("branch1")
        out += self.branch2.named_params("branch2")
        out += self.trunk.named_params("trunk")
        out += self.proj1.named_params("proj1")
        for i, layer in enumerate(self.decoder):
            out += layer.named_params(f"decoder{i}")
        out += self.proj2.named_params("proj2")
        out += self.proj3.named_params("proj3")
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        """Exhaustive enumeration; complex entries count as two scalars."""
        total = 0
        for _, p in self.named_parameters():
            total += p.size * (2 if np.iscomplexobj(p.data) else 1)
        return total

    # -- forward ------------------------------------------------------------

    def encode(self, spatial: Tensor, scalars: Tensor, times: Tensor,
               trace: list | None = None) -> Tensor:
        """Merge branch and trunk encodings into the latent grid field.

        spatial [B_S, C_sp, H, W], scalars [B_S, d_s], times [B_T, 1] in
        [0, 1]; returns [B_S*B_T, width, H, W] ordered sample-major.
        """
        cfg = self.config
        if spatial.ndim != 4 or spatial.shape[1] != cfg.spatial_in_channels:
            raise ShapeError(
                f"spatial input must be [B,{cfg.spatial_in_channels},H,W], got {spatial.shape}")
        if scalars.ndim != 2 or scalars.shape[1] != cfg.scalar_in_dim:
            raise ShapeError(
                f"scalar input must be [B,{cfg.scalar_in_dim}], got {scalars.shape}")
        if times.ndim != 2 or times.shape[1] != cfg.trunk_in_dim:
            raise ShapeError(f"times must be [B_T,{cfg.trunk_in_dim}], got {times.shape}")
        bs = spatial.shape[0]
        bt = times.shape[0]
        Wd = cfg.width
        H, Wg = spatial.shape[2], spatial.shape[3]

        b1 = self.branch1(spatial)                           # [B_S, W, H, Wg]
        b2 = self.branch2(scalars)                           # [B_S, W]
        t = self.trunk(times)                                # [B_T, W]
        if trace is not None:
            trace.append(("branch1", b1.shape))
            trace.append(("branch2", b2.shape))
            trace.append(("trunk", t.shape))

        merged = T.add(b1, T.reshape(b2, (bs, Wd, 1, 1)))    # branch merger: sum
        if trace is not None:
            trace.append(("branch_merger", merged.shape))

        m5 = T.broadcast_to(T.reshape(merged, (bs, 1, Wd, H, Wg)), (bs, bt, Wd, H, Wg))
        t5 = T.broadcast_to(T.reshape(t, (1, bt, Wd, 1, 1)), (bs, bt, Wd, H, Wg))
        z = T.reshape(T.mul(m5, t5), (bs * bt, Wd, H, Wg))   # trunk merger: product
        if trace is not None:
            trace.append(("branch_trunk_merger", z.shape))
        return z

    def decode(self, z: Tensor, trace: list | None = None) -> Tensor:
        cfg = self.config
        if z.shape[1] != cfg.width:
            raise ShapeError(f"decoder width {cfg.width}, input channels {z.shape[1]}")
        h = self.proj1(z)
        if trace is not None:
            trace.append(("projection1", h.shape))
        counters = {"f_fourier": 0, "u_fourier": 0}
        for layer in self.decoder:
            h = layer(h)
            if trace is not None:
                kind = "f_fourier" if isinstance(layer, L.FFourierLayer) else "u_fourier"
                counters[kind] += 1
                trace.append((f"{kind}{counters[kind]}", h.shape))
        h = T.relu(self.proj2(h))
        if trace is not None:
            trace.append(("projection2", h.shape))
        out = self.proj3(h)
        if trace is not None:
            trace.append(("projection3", out.shape))
        return out

    def forward(self, spatial: Tensor, scalars: Tensor, times: Tensor,
                trace: list | None = None) -> Tensor:
        """Full operator: [B_S, B_T, H, W] prediction grid."""
        bs, bt = spatial.shape[0], times.shape[0]
        z = self.encode(spatial, scalars, times, trace)
        y = self.decode(z, trace)
        out = T.reshape(y, (bs, bt, y.shape[2], y.shape[3]))
        if trace is not None:
            trace.append(("output", out.shape))
        return out

    def __call__(self, spatial, scalars, times, trace=None):
        return self.forward(spatial, scalars, times, trace)


def _fnn_count(dims) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def analytic_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a configuration; complex spectral
    entries count as two scalars."""
    W = config.width
    P = config.projection_width
    hid = list(config.branch_hidden)
    total = 0
    total += config.spatial_in_channels * W + W                     # branch1 lift
    total += _fnn_count([config.scalar_in_dim, *hid, W])            # branch2
    total += _fnn_count([config.trunk_in_dim, *hid, W])             # trunk
    total += W * W + W                                              # proj1
    Wh = config.ff_expansion * W
    f_layer = (2 * (config.modes_r + config.modes_z) * W * W
               + (W * Wh + Wh) + (Wh * W + W))
    unet = ((config.unet_depth + 2) * (9 * W * W + W)               # encoders+bottleneck+final
            + config.unet_depth * (2 * W * W + W))                  # skip fusers
    u_layer = 2 * config.modes_r * config.modes_z * W * W + unet + (W * W + W)
    for kind in config.decoder_layers():
        total += f_layer if kind == "f" else u_layer
    total += W * P + P                                              # proj2
    total += P * 1 + 1                                              # proj3
    return total


# ---------------------------------------------------------------------------
# input featurization

_KH_LOG_RANGE = (math.log10(FIELD_RANGES["kh"][0]), math.log10(FIELD_RANGES["kh"][1]))
_SCALAR_ORDER = ("q", "krw_max", "krg_max", "swi", "sgr", "m", "n")

# fixed per-target scale the model trains against; predictions are
# multiplied back. The relative loss is scale-invariant, so this only
# conditions optimization (pressure buildup spans tens of bar).
TARGET_SCALE = {"sg": 1.0, "dp": 50.0}


def spatial_features(sample: Sample, grid: Grid) -> np.ndarray:
    """Five input channels on the grid: normalized log-permeability, raw
    anisotropy, normalized porosity, and normalized r/z index coordinates."""
    lo, hi = _KH_LOG_RANGE
    kh_n = (np.log10(np.asarray(sample.fields.kh, dtype=np.float64)) - lo) / (hi - lo)
    p_lo, p_hi = FIELD_RANGES["phi"]
    phi_n = (np.asarray(sample.fields.phi, dtype=np.float64) - p_lo) / (p_hi - p_lo)
    nr, nz = grid.nr, grid.nz
    r_coord = np.broadcast_to(np.linspace(0.0, 1.0, nr)[:, None], (nr, nz))
    z_coord = np.broadcast_to(np.linspace(0.0, 1.0, nz)[None, :], (nr, nz))
    return np.stack([kh_n, np.asarray(sample.fields.aniso, dtype=np.float64),
                     phi_n, r_coord, z_coord]).astype(np.float64)


def scalar_features(sample: Sample) -> np.ndarray:
    """Injection rate and curve coefficients, min-max normalized."""
    raw = [sample.q, *sample.coeffs.as_array()]
    out = np.empty(7, dtype=np.float64)
    for j, (name, v) in enumerate(zip(_SCALAR_ORDER, raw)):
        lo, hi = SCALAR_RANGES[name]
        out[j] = (v - lo) / (hi - lo)
    return out


def time_features(grid: Grid, indices=None) -> np.ndarray:
    """Report days mapped to [0, 1] by t = day / (last day)."""
    days = np.asarray(grid.report_days, dtype=np.float64)
    t = days / days[-1]
    if indices is not None:
        t = t[np.asarray(indices, dtype=int)]
    return t[:, None]


# ---------------------------------------------------------------------------
# checkpoint format: magic "FCK1", 8-byte little-endian header length,
# JSON header (config + tensor manifest), raw little-endian f32 blobs
# (complex tensors are stored as interleaved re/im f32 pairs)

_FCK_MAGIC = b"FCK1"


def save_checkpoint(model: FfinoModel, path) -> None:
    if model.precision != "single":
        raise ValueError("checkpoints store 32-bit floats; save single-precision models only")
    manifest = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        if np.iscomplexobj(p.data):
            arr = np.ascontiguousarray(p.data.astype("<c8"))
            dtype = "c64"
        else:
            arr = np.ascontiguousarray(p.data.astype("<f4"))
            dtype = "f32"
        manifest.append({"name": name, "shape": list(p.shape), "dtype": dtype,
                         "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"version": 1, "config": asdict(model.config), "manifest": manifest}
    hbytes = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_FCK_MAGIC)
        f.write(len(hbytes).to_bytes(8, "little"))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> FfinoModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _FCK_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {_FCK_MAGIC!r}")
    hlen = int.from_bytes(raw[4:12], "little")
    if 12 + hlen > len(raw):
        raise DataFormatError(f"{path}: header length {hlen} overruns file (size {len(raw)})")
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: malformed JSON header: {e}") from e
    if header.get("version") != 1:
        raise DataFormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    cdict = dict(header["config"])
    cdict["custom_decoder"] = tuple(cdict.get("custom_decoder", ()))
    cdict["branch_hidden"] = tuple(cdict.get("branch_hidden", (64, 64)))
    config = ModelConfig(**cdict)
    model = FfinoModel(config, seed=0, precision="single")
    params = dict(model.named_parameters())
    data0 = 12 + hlen
    for entry in header["manifest"]:
        name = entry["name"]
        if name not in params:
            raise DataFormatError(f"{path}: unknown parameter {name!r} in manifest")
        shape = tuple(entry["shape"])
        itemsize = 8 if entry["dtype"] == "c64" else 4
        np_dtype = "<c8" if entry["dtype"] == "c64" else "<f4"
        nbytes = int(np.prod(shape)) * itemsize
        start = data0 + entry["offset"]
        end = start + nbytes
        if end > len(raw):
            raise DataFormatError(
                f"{path}: parameter {name!r} at offset {start} overruns file (size {len(raw)})")
        arr = np.frombuffer(raw[start:end], dtype=np_dtype).reshape(shape)
        p = params[name]
        if p.shape != shape:
            raise DataFormatError(f"{path}: parameter {name!r} shape {shape} != model {p.shape}")
        p.data = arr.copy()
    return model
