"""Synthetic data pipeline: relative-permeability curves and fitting,
Latin hypercube scalar sampling, heterogeneous field synthesis, a
deterministic analytic two-phase toy forward model, and the dataset file
format.

The toy forward model is NOT a reservoir simulator. It is a smooth,
deterministic stand-in (Welge front-radius construction for saturation,
exponential-integral line-source response for pressure buildup) that
depends on the sampled inputs so end-to-end learning can be verified at
desk scale.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

__all__ = [
    "RelPermCoeffs",
    "FieldMaps",
    "Sample",
    "Dataset",
    "Grid",
    "ToyPhysicsConstants",
    "FractalFieldParams",
    "FitError",
    "DataFormatError",
    "SCALAR_RANGES",
    "FIELD_RANGES",
    "LITERATURE_RELPERM_CASES",
    "REPORT_DAYS",
    "mbc_eval",
    "mbc_fit",
    "lhs_sample",
    "fractal_kh",
    "aniso_map",
    "porosity_from_perm",
    "exp_integral_e1",
    "fractional_flow",
    "welge_front",
    "toy_targets",
    "make_grid",
    "sample_from_seed",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "split_dataset",
    "dataset_summary",
]


class FitError(Exception):
    """Curve fit failed; carries the best coefficients seen and the residual."""

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class DataFormatError(Exception):
    """Raised for malformed dataset/checkpoint files, with byte offsets."""


# ---------------------------------------------------------------------------
# sampled-variable ranges (scalar ranges also drive input normalization)

SCALAR_RANGES: dict[str, tuple[float, float]] = {
    "q": (25_500.0, 255_000.0),        # injection rate, m^3/day
    "krw_max": (0.530, 0.768),
    "krg_max": (0.031, 0.056),
    "swi": (0.340, 0.500),
    "sgr": (0.030, 0.120),
    "m": (1.453, 3.808),
    "n": (1.052, 3.317),
}

FIELD_RANGES: dict[str, tuple[float, float]] = {
    "kh": (44.1, 1000.0),              # horizontal permeability, mD
    "aniso": (0.01, 1.00),             # kv/kh
    "phi": (0.140, 0.345),             # porosity
}

REPORT_DAYS = (1, 4, 9, 16, 25, 37, 52, 70, 91, 116, 145, 180)

WELL_RADIUS_M = 0.0762
OUTER_RADIUS_M = 30_480.0
THICKNESS_M = 97.536


@dataclass(frozen=True)
class RelPermCoeffs:
    """Six-coefficient power-law relative-permeability curve pair."""

    krw_max: float
    krg_max: float
    swi: float
    sgr: float
    m: float
    n: float

    def __post_init__(self):
        if not (0 < self.krw_max <= 1 and 0 < self.krg_max <= 1):
            raise ValueError(f"end-point relperms must lie in (0,1]: {self}")
        if self.swi < 0 or self.sgr < 0 or self.swi + self.sgr >= 1:
            raise ValueError(f"need swi,sgr >= 0 and swi+sgr < 1: {self}")
        if self.m <= 0 or self.n <= 0:
            raise ValueError(f"exponents must be positive: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.krw_max, self.krg_max, self.swi, self.sgr, self.m, self.n])

    @staticmethod
    def from_array(a) -> "RelPermCoeffs":
        return RelPermCoeffs(*(float(v) for v in a))


# published hydrogen/brine curve fits used as fixed reference cases
LITERATURE_RELPERM_CASES: dict[str, RelPermCoeffs] = {
    "boon_hajibeygi_2022": RelPermCoeffs(0.768, 0.031, 0.50, 0.03, 3.808, 1.052),
    "yekta_2018_shallow": RelPermCoeffs(0.642, 0.056, 0.37, 0.08, 1.453, 3.317),
    "yekta_2018_deep": RelPermCoeffs(0.530, 0.042, 0.34, 0.12, 1.560, 1.930),
}


@dataclass(frozen=True)
class ToyPhysicsConstants:
    """Fixed constants of the analytic toy forward model."""

    mu_g: float = 0.0094          # gas viscosity, mPa*s
    mu_w: float = 0.547           # water viscosity at 50 degC, mPa*s
    thickness: float = THICKNESS_M
    eta0: float = 40.0            # diffusivity scale, m^2/(mD*day)
    pressure_scale: float = 0.004  # calibrated so peak buildup is O(10-100) bar

    def __post_init__(self):
        for name in ("mu_g", "mu_w", "thickness", "eta0", "pressure_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Grid:
    """Radial grid: geometrically coarsening radii, uniform depths."""

    r_centers: np.ndarray
    z_centers: np.ndarray
    report_days: tuple[int, ...] = REPORT_DAYS

    def __post_init__(self):
        if not np.all(np.diff(self.r_centers) > 0) or not np.all(np.diff(self.z_centers) > 0):
            raise ValueError("grid coordinates must be strictly increasing")
        if len(self.report_days) != 12:
            raise ValueError("exactly 12 report days expected")

    @property
    def nr(self) -> int:
        return len(self.r_centers)

    @property
    def nz(self) -> int:
        return len(self.z_centers)


def make_grid(nr: int = 192, nz: int = 64) -> Grid:
    if nr < 2 or nz < 2:
        raise ValueError(f"grid must be at least 2x2, got ({nr},{nz})")
    faces = np.geomspace(WELL_RADIUS_M, OUTER_RADIUS_M, nr + 1)
    r = np.sqrt(faces[:-1] * faces[1:])
    z = (np.arange(nz) + 0.5) * (THICKNESS_M / nz)
    return Grid(r_centers=r, z_centers=z)


@dataclass
class FieldMaps:
    kh: np.ndarray
    aniso: np.ndarray
    phi: np.ndarray


@dataclass
class Sample:
    """One training record: spatial fields, scalars, target fields."""

    fields: FieldMaps
    q: float
    coeffs: RelPermCoeffs
    sg: np.ndarray    # [12, nr, nz]
    dp: np.ndarray    # [12, nr, nz], bar


@dataclass
class Dataset:
    grid: Grid
    samples: list[Sample]
    seed: int | None = None

    def __len__(self):
        return len(self.samples)


# ---------------------------------------------------------------------------
# relative permeability

def _mbc_raw(sw, krw_max, krg_max, swi, sgr, m, n):
    sw = np.asarray(sw, dtype=np.float64)
    denom = max(1.0 - sgr - swi, 1e-9)
    sn = np.clip((sw - swi) / denom, 0.0, 1.0)
    krw = krw_max * sn ** m
    krg = krg_max * (1.0 - sn) ** n
    return krw, krg


def mbc_eval(sw, coeffs: RelPermCoeffs):
    """Water and gas relative permeability at water saturation ``sw``.

    Outside the mobile range the normalized saturation argument saturates,
    clamping each curve to its end-point value.
    """
    if not isinstance(coeffs, RelPermCoeffs):
        coeffs = RelPermCoeffs.from_array(coeffs)
    return _mbc_raw(sw, *coeffs.as_array())


def mbc_fit(points, init: RelPermCoeffs, max_nfev: int = 5000) -> RelPermCoeffs:
    """Least-squares fit of the six curve coefficients to sampled
    (sw, krw, krg) triples, both curves jointly, box-bounded to the valid
    region. Raises FitError on non-convergence, carrying best-so-far."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be an (n, 3) array of (sw, krw, krg)")
    if pts.shape[0] < 8:
        raise ValueError(f"need at least 8 points spanning the mobile range, got {pts.shape[0]}")
    sw, krw_obs, krg_obs = pts[:, 0], pts[:, 1], pts[:, 2]

    def residual(theta):
        krw, krg = _mbc_raw(sw, *theta)
        return np.concatenate([krw - krw_obs, krg - krg_obs])

    lo = [1e-6, 1e-6, 0.0, 0.0, 0.05, 0.05]
    hi = [1.0, 1.0, 0.85, 0.85, 12.0, 12.0]
    x0 = np.clip(init.as_array(), lo, hi)
    res = least_squares(residual, x0, bounds=(lo, hi), max_nfev=max_nfev)
    cost = float(np.sqrt(2.0 * res.cost))
    if not res.success:
        raise FitError("relperm fit did not converge", best=res.x, residual=cost)
    try:
        return RelPermCoeffs.from_array(res.x)
    except ValueError as e:
        raise FitError(f"fit left the valid coefficient region: {e}",
                       best=res.x, residual=cost) from e


# ---------------------------------------------------------------------------
# Latin hypercube sampling

def lhs_sample(n: int, ranges, seed: int) -> np.ndarray:
    """n stratified samples per dimension: each of the n equal-width strata
    holds exactly one sample, uniformly jittered, with an independent
    random stratum permutation per dimension."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ranges = list(ranges.values()) if isinstance(ranges, dict) else list(ranges)
    rng = np.random.default_rng(seed)
    out = np.empty((n, len(ranges)), dtype=np.float64)
    for j, (lo, hi) in enumerate(ranges):
        if not lo < hi:
            raise ValueError(f"dimension {j}: need lo < hi, got [{lo}, {hi}]")
        strata = rng.permutation(n)
        jitter = rng.uniform(size=n)
        out[:, j] = lo + (hi - lo) * (strata + jitter) / n
    return out


# ---------------------------------------------------------------------------
# spatial field synthesis

@dataclass(frozen=True)
class FractalFieldParams:
    k_min: float = FIELD_RANGES["kh"][0]
    k_base: float = 300.0
    k_max: float = FIELD_RANGES["kh"][1]
    hurst: float = 0.5
    anisotropy_ratio: float = 1.0   # correlation stretch in (0, 1]
    rotation: float = 0.0           # radians

    def __post_init__(self):
        if not (self.k_min < self.k_base < self.k_max):
            raise ValueError(
                f"need k_min < k_base < k_max, got {self.k_min}, {self.k_base}, {self.k_max}")
        if self.k_min <= 0:
            raise ValueError("permeabilities must be positive")
        if not (0 < self.anisotropy_ratio <= 1):
            raise ValueError("anisotropy_ratio must lie in (0, 1]")
        if self.hurst <= 0:
            raise ValueError("hurst must be positive")


# log-space spread of the permeability field at the reference roughness
KH_LOG_SPREAD = 0.55
_HURST_REF = 0.5


def _spectral_noise(rng: np.random.Generator, nr: int, nz: int, hurst: float,
                    stretch: float, rotation: float) -> tuple[np.ndarray, float]:
    """Gaussian random field with power spectrum ~ (1+|k|)^-(2*hurst+2),
    anisotropic stretch and rotation applied to the wavevector in
    frequency space. Returns the field and its exact per-cell std."""
    kx = np.fft.fftfreq(nr) * nr
    ky = np.fft.fftfreq(nz) * nz
    KX, KY = np.meshgrid(kx, ky, indexing="ij")
    ct, st = math.cos(rotation), math.sin(rotation)
    kxr = ct * KX + st * KY
    kyr = -st * KX + ct * KY
    kmag = np.sqrt(kxr ** 2 + (kyr / stretch) ** 2)
    amp = (1.0 + kmag) ** (-(hurst + 1.0))
    amp[0, 0] = 0.0
    noise = rng.standard_normal((nr, nz)) + 1j * rng.standard_normal((nr, nz))
    g = np.fft.ifft2(noise * amp).real
    sigma = float(np.sqrt((amp ** 2).sum()) / (nr * nz))
    return g, sigma


def fractal_kh(rng: np.random.Generator | int, params: FractalFieldParams,
               nr: int = 192, nz: int = 64) -> np.ndarray:
    """Heterogeneous horizontal-permeability map: spectral synthesis of
    fractional-Brownian noise, exponentiated, scaled so the field median
    sits at k_base, clamped to [k_min, k_max].

    The spectral gain is anchored at a fixed reference roughness, so a
    very large hurst collapses the spectrum and the field goes nearly
    constant at k_base.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    g, sigma = _spectral_noise(rng, nr, nz, params.hurst,
                               params.anisotropy_ratio, params.rotation)
    _, sigma_ref = _spectral_noise(np.random.default_rng(0), nr, nz, _HURST_REF,
                                   params.anisotropy_ratio, params.rotation)
    g = g - np.median(g)
    log_field = (KH_LOG_SPREAD / sigma_ref) * g
    field = params.k_base * np.exp(log_field)
    return np.clip(field, params.k_min, params.k_max)


# anisotropy marginal: skew-normal, calibrated against the target
# population mean 0.305 and std 0.134 after clamping to [0.01, 1.00]
ANISO_SHAPE = 4.0
ANISO_LOC = 0.1413
ANISO_SCALE = 0.2117
_ANISO_HURST = 0.5


def aniso_map(rng: np.random.Generator | int, nr: int = 192, nz: int = 64) -> np.ndarray:
    """Vertical-anisotropy (kv/kh) map in [0.01, 1.00].

    Two spatially coherent Gaussian fields with exactly standard-normal
    marginals are combined by the skew-normal construction
    X = delta*|g1| + sqrt(1-delta^2)*g2, giving exact skew-normal
    marginals while keeping spatial smoothness.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    g1, s1 = _spectral_noise(rng, nr, nz, _ANISO_HURST, 1.0, 0.0)
    g2, s2 = _spectral_noise(rng, nr, nz, _ANISO_HURST, 1.0, 0.0)
    delta = ANISO_SHAPE / math.sqrt(1.0 + ANISO_SHAPE ** 2)
    x = delta * np.abs(g1 / s1) + math.sqrt(1.0 - delta ** 2) * (g2 / s2)
    lo, hi = FIELD_RANGES["aniso"]
    return np.clip(ANISO_LOC + ANISO_SCALE * x, lo, hi)


def porosity_from_perm(kh: np.ndarray, rng: np.random.Generator | int,
                       noise_std: float = 0.005) -> np.ndarray:
    """Porosity from permeability through a log-linear map of the full kh
    range onto the porosity range, perturbed by zero-mean Gaussian noise
    with std 0.005, clamped to the porosity range."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    k_lo, k_hi = FIELD_RANGES["kh"]
    p_lo, p_hi = FIELD_RANGES["phi"]
    b = (p_hi - p_lo) / (math.log10(k_hi) - math.log10(k_lo))
    phi = p_lo + b * (np.log10(np.asarray(kh, dtype=np.float64)) - math.log10(k_lo))
    if noise_std > 0:
        phi = phi + rng.normal(0.0, noise_std, size=np.shape(kh))
    return np.clip(phi, p_lo, p_hi)


# ---------------------------------------------------------------------------
# exponential integral E1

_EULER_GAMMA = 0.5772156649015329


def exp_integral_e1(x) -> np.ndarray:
    """E1(x) for x > 0: power series below 1, modified-Lentz continued
    fraction above, absolute error below 1e-10."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("E1 requires x > 0")
    out = np.empty_like(x)

    small = x < 1.0
    if np.any(small):
        xs = x[small]
        total = np.zeros_like(xs)
        term = np.ones_like(xs)
        for k in range(1, 30):
            term = term * (-xs) / k
            total += -term / k
        out[small] = -_EULER_GAMMA - np.log(xs) + total

    big = ~small
    if np.any(big):
        xb = x[big]
        tiny = 1e-300
        f = xb + 1.0
        c = f.copy()
        d = np.zeros_like(xb)
        for i in range(1, 120):
            a_i = -float(i * i)
            b_i = xb + 2.0 * i + 1.0
            d = b_i + a_i * d
            d[d == 0] = tiny
            c = b_i + a_i / c
            c[c == 0] = tiny
            d = 1.0 / d
            f = f * (c * d)
        out[big] = np.exp(-xb) / f

    return out


# ---------------------------------------------------------------------------
# fractional flow and the Welge front construction

def fractional_flow(sg, coeffs: RelPermCoeffs, mu_g: float, mu_w: float) -> np.ndarray:
    """Gas fractional flow f_g(S_g) over the power-law curve pair."""
    sg = np.asarray(sg, dtype=np.float64)
    krw, krg = mbc_eval(1.0 - sg, coeffs)
    lam_g = krg / mu_g
    lam_w = krw / mu_w
    total = lam_g + lam_w
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(total > 0, lam_g / total, 0.0)
    return f


def _fractional_flow_deriv(sg: float, coeffs: RelPermCoeffs, mu_g: float, mu_w: float,
                           h: float = 1e-7) -> float:
    lo = max(sg - h, 0.0)
    hi = min(sg + h, 1.0)
    f = fractional_flow(np.array([lo, hi]), coeffs, mu_g, mu_w)
    return float((f[1] - f[0]) / (hi - lo))


def welge_front(coeffs: RelPermCoeffs, mu_g: float, mu_w: float) -> tuple[float, float]:
    """Shock saturation and chord slope of the tangent construction.

    Maximizes the chord slope f_g(S)/S from the origin over the mobile
    gas range; for these monotone S-shaped curves the maximizer is the
    tangency point. Returns (S_front, chord slope)."""
    s_max = 1.0 - coeffs.swi
    eps = 1e-9

    def chord(s):
        return fractional_flow(np.asarray(s), coeffs, mu_g, mu_w) / np.asarray(s)

    grid = np.linspace(eps, s_max, 4097)
    q = chord(grid)
    i = int(np.argmax(q))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - inv_phi * (b - a)
    x2 = a + inv_phi * (b - a)
    f1 = chord(x1)
    f2 = chord(x2)
    for _ in range(120):
        if f1 < f2:
            a = x1
            x1, f1 = x2, f2
            x2 = a + inv_phi * (b - a)
            f2 = chord(x2)
        else:
            b = x2
            x2, f2 = x1, f1
            x1 = b - inv_phi * (b - a)
            f1 = chord(x1)
        if b - a < 1e-13:
            break
    s_front = 0.5 * (a + b)
    return float(s_front), float(chord(s_front))


# ---------------------------------------------------------------------------
# toy forward model

def toy_targets(fields: FieldMaps, q: float, coeffs: RelPermCoeffs, grid: Grid,
                consts: ToyPhysicsConstants = ToyPhysicsConstants()) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic analytic two-phase response on the grid.

    Saturation: per-depth frontal radius from the Welge chord slope with
    a permeability row weighting; an elliptic profile behind the front at
    the shock saturation, capped at 1 - swi. Pressure buildup: scaled
    line-source exponential-integral response per depth row.
    Returns (sg, dp), each [12, nr, nz].
    """
    s_front, chord = welge_front(coeffs, consts.mu_g, consts.mu_w)
    kh = fields.kh
    w_z = kh.mean(axis=0) / kh.mean()             # [nz]
    kbar_z = kh.mean(axis=0)                      # [nz], mD
    phi_bar = float(fields.phi.mean())

    r = grid.r_centers[:, None]                   # [nr, 1]
    t = np.asarray(grid.report_days, dtype=np.float64)[:, None, None]  # [12,1,1]

    rf_sq = q * t * chord * w_z[None, None, :] / (math.pi * consts.thickness * phi_bar)
    profile = np.clip(1.0 - (r[None] ** 2) / rf_sq, 0.0, 1.0)
    sg = np.minimum(s_front * np.sqrt(profile), 1.0 - coeffs.swi)

    x = (r[None] ** 2) / (4.0 * consts.eta0 * kbar_z[None, None, :] * t)
    dp = consts.pressure_scale * (q * consts.mu_w / kbar_z[None, None, :]) * exp_integral_e1(x)

    return sg.astype(np.float64), dp.astype(np.float64)


# ---------------------------------------------------------------------------
# per-sample generation

def _sample_rngs(seed: int, index: int):
    root = np.random.SeedSequence((int(seed), int(index)))
    return [np.random.default_rng(s) for s in root.spawn(4)]


def sample_from_seed(seed: int, index: int, grid: Grid,
                     consts: ToyPhysicsConstants = ToyPhysicsConstants(),
                     coeffs_override: RelPermCoeffs | None = None) -> Sample:
    """Build one sample deterministically from (seed, index), independent
    of how many samples exist or in what order they are generated."""
    rng_scalars, rng_kh, rng_aniso, rng_phi = _sample_rngs(seed, index)

    def draw(name):
        lo, hi = SCALAR_RANGES[name]
        return float(rng_scalars.uniform(lo, hi))

    q = draw("q")
    if coeffs_override is not None:
        coeffs = coeffs_override
        for _ in range(6):
            rng_scalars.uniform()   # keep the stream aligned with the default path
    else:
        coeffs = RelPermCoeffs(draw("krw_max"), draw("krg_max"), draw("swi"),
                               draw("sgr"), draw("m"), draw("n"))

    k_lo, k_hi = FIELD_RANGES["kh"]
    params = FractalFieldParams(
        k_min=k_lo,
        k_base=float(np.exp(rng_kh.uniform(np.log(150.0), np.log(500.0)))),
        k_max=k_hi,
        hurst=float(rng_kh.uniform(0.3, 0.9)),
        anisotropy_ratio=float(rng_kh.uniform(0.3, 1.0)),
        rotation=float(rng_kh.uniform(0.0, math.pi)),
    )
    kh = fractal_kh(rng_kh, params, grid.nr, grid.nz)
    aniso = aniso_map(rng_aniso, grid.nr, grid.nz)
    phi = porosity_from_perm(kh, rng_phi)
    fields = FieldMaps(kh=kh, aniso=aniso, phi=phi)
    sg, dp = toy_targets(fields, q, coeffs, grid, consts)
    return Sample(fields=fields, q=q, coeffs=coeffs,
                  sg=sg.astype(np.float32), dp=dp.astype(np.float32))


# ---------------------------------------------------------------------------
# dataset file format: magic "FDS1", 8-byte little-endian header length,
# JSON header (grid spec, array manifest), then raw little-endian f32 blobs

_FDS_MAGIC = b"FDS1"
_SAMPLE_ARRAYS = ("kh", "aniso", "phi", "q", "coeffs", "sg", "dp")


def _sample_array(s: Sample, name: str) -> np.ndarray:
    if name == "kh":
        return s.fields.kh
    if name == "aniso":
        return s.fields.aniso
    if name == "phi":
        return s.fields.phi
    if name == "q":
        return np.array([s.q])
    if name == "coeffs":
        return s.coeffs.as_array()
    if name == "sg":
        return s.sg
    if name == "dp":
        return s.dp
    raise KeyError(name)


def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    manifest = []
    blobs = []
    offset = 0
    for i, s in enumerate(ds.samples):
        for name in _SAMPLE_ARRAYS:
            arr = np.ascontiguousarray(_sample_array(s, name), dtype="<f4")
            manifest.append({"name": f"sample{i:05d}/{name}",
                             "shape": list(arr.shape),
                             "dtype": "f32",
                             "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "version": 1,
        "n_samples": len(ds.samples),
        "seed": ds.seed,
        "grid": {
            "nr": ds.grid.nr,
            "nz": ds.grid.nz,
            "r_centers": [float(v) for v in ds.grid.r_centers],
            "z_centers": [float(v) for v in ds.grid.z_centers],
            "report_days": list(ds.grid.report_days),
        },
        "arrays": manifest,
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_FDS_MAGIC)
        f.write(len(hbytes).to_bytes(8, "little"))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def read_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _FDS_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {_FDS_MAGIC!r}")
    hlen = int.from_bytes(raw[4:12], "little")
    if 12 + hlen > len(raw):
        raise DataFormatError(f"{path}: header length {hlen} overruns file (size {len(raw)})")
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: malformed JSON header: {e}") from e
    if header.get("version") != 1:
        raise DataFormatError(f"{path}: unsupported format version {header.get('version')!r}")
    data0 = 12 + hlen
    g = header["grid"]
    grid = Grid(r_centers=np.asarray(g["r_centers"], dtype=np.float64),
                z_centers=np.asarray(g["z_centers"], dtype=np.float64),
                report_days=tuple(g["report_days"]))

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        if entry["dtype"] != "f32":
            raise DataFormatError(f"{path}: unsupported dtype {entry['dtype']} for {entry['name']}")
        nbytes = int(np.prod(shape)) * 4
        start = data0 + entry["offset"]
        end = start + nbytes
        if end > len(raw):
            raise DataFormatError(
                f"{path}: array {entry['name']} at offset {start} overruns file (size {len(raw)})")
        arrays[entry["name"]] = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape)

    samples = []
    for i in range(header["n_samples"]):
        pick = {name: arrays[f"sample{i:05d}/{name}"] for name in _SAMPLE_ARRAYS}
        samples.append(Sample(
            fields=FieldMaps(kh=pick["kh"], aniso=pick["aniso"], phi=pick["phi"]),
            q=float(pick["q"][0]),
            coeffs=RelPermCoeffs.from_array(pick["coeffs"]),
            sg=pick["sg"],
            dp=pick["dp"],
        ))
    return Dataset(grid=grid, samples=samples, seed=header.get("seed"))


def generate_dataset(n: int, seed: int, path=None, grid: Grid | None = None,
                     consts: ToyPhysicsConstants = ToyPhysicsConstants(),
                     coeffs_override: RelPermCoeffs | None = None) -> Dataset:
    """Generate n samples from per-sample derived seeds (seed, index) and
    optionally write them to ``path``. Byte-identical for equal (n, seed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grid = grid or make_grid()
    samples = [sample_from_seed(seed, i, grid, consts, coeffs_override) for i in range(n)]
    ds = Dataset(grid=grid, samples=samples, seed=seed)
    if path is not None:
        write_dataset(ds, path)
    return ds


TRAIN_FRACTION = 0.923


def split_dataset(ds: Dataset) -> tuple[list[Sample], list[Sample]]:
    """First ceil(0.923*n) samples train, the rest test."""
    cut = math.ceil(TRAIN_FRACTION * len(ds.samples))
    return ds.samples[:cut], ds.samples[cut:]


def dataset_summary(ds: Dataset) -> list[dict]:
    """Min/max/mean/std rows for each sampled variable, pooled over samples."""
    rows = []

    def add(name, values):
        v = np.asarray(values, dtype=np.float64)
        rows.append({"variable": name, "min": float(v.min()), "max": float(v.max()),
                     "mean": float(v.mean()), "std": float(v.std())})

    add("kh", np.stack([s.fields.kh for s in ds.samples]))
    add("aniso", np.stack([s.fields.aniso for s in ds.samples]))
    add("phi", np.stack([s.fields.phi for s in ds.samples]))
    add("q", [s.q for s in ds.samples])
    for j, name in enumerate(["krw_max", "krg_max", "swi", "sgr", "m", "n"]):
        add(name, [s.coeffs.as_array()[j] for s in ds.samples])
    return rows
