"""Evaluation: the four-metric suite (R^2, RMSE, SSIM, MRE over areas of
interest), per-sample reports with aggregates, and artifact emission
(binary PPM heatmap panels, scatter-density histogram CSV).
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .datagen import Grid, Sample
from .model import (TARGET_SCALE, FfinoModel, scalar_features, spatial_features,
                    time_features)
from .tensor import Tensor

__all__ = [
    "AOIConfig",
    "MetricReport",
    "r2",
    "rmse",
    "ssim",
    "mre_aoi",
    "predict_sample",
    "evaluate",
    "evaluate_predictions",
    "write_heatmap_panels",
    "write_scatter_density",
    "COLORMAP",
]


@dataclass(frozen=True)
class AOIConfig:
    """Reference thresholds defining the area of interest per target."""

    sg_threshold: float = 0.01
    dp_threshold: float = 0.005   # bar

    def __post_init__(self):
        if self.sg_threshold <= 0 or self.dp_threshold <= 0:
            raise ValueError("AOI thresholds must be positive")

    def threshold(self, target: str) -> float:
        return self.sg_threshold if target == "sg" else self.dp_threshold


# ---------------------------------------------------------------------------
# metrics

def r2(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size < 2:
        raise ValueError("R^2 needs at least two elements")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("R^2 undefined: reference has zero variance")
    ss_res = float(((y - y_hat) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def _gaussian_kernel(win: int, sigma: float) -> np.ndarray:
    ax = np.arange(win, dtype=np.float64) - win // 2
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(y, y_hat, win: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over valid Gaussian windows; the dynamic range is
    taken from the reference field."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.ndim != 2 or y.shape != y_hat.shape:
        raise ValueError(f"ssim expects two equal-shape 2-D fields, got {y.shape}, {y_hat.shape}")
    if min(y.shape) < win:
        raise ValueError(f"field {y.shape} smaller than the {win}x{win} window")
    L = float(y.max() - y.min())
    if L <= 0:
        raise ValueError("reference field has zero dynamic range")
    kern = _gaussian_kernel(win, sigma)
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2

    wa = sliding_window_view(y, (win, win))
    wb = sliding_window_view(y_hat, (win, win))
    mu_a = np.einsum("ijkl,kl->ij", wa, kern, optimize=True)
    mu_b = np.einsum("ijkl,kl->ij", wb, kern, optimize=True)
    aa = np.einsum("ijkl,kl->ij", wa * wa, kern, optimize=True)
    bb = np.einsum("ijkl,kl->ij", wb * wb, kern, optimize=True)
    ab = np.einsum("ijkl,kl->ij", wa * wb, kern, optimize=True)
    var_a = aa - mu_a ** 2
    var_b = bb - mu_b ** 2
    cov = ab - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def ssim_stack(y, y_hat, **kw) -> float:
    """Per-time-step SSIM averaged over the stack's first axis."""
    y = np.asarray(y)
    return float(np.mean([ssim(y[i], np.asarray(y_hat)[i], **kw) for i in range(y.shape[0])]))


def mre_aoi(y, y_hat, threshold: float, mode: str = "sum_ratio") -> float:
    """Mean relative error restricted to cells where the reference is at
    least ``threshold``.

    sum_ratio (default): sum|err| / sum|ref| over the AOI. per_cell:
    mean of per-cell |err|/|ref|. An empty AOI yields 0 with a warning.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    mask = y >= threshold
    if not mask.any():
        warnings.warn("empty area of interest; MRE defined as 0", stacklevel=2)
        return 0.0
    if mode == "sum_ratio":
        return float(np.abs(y_hat[mask] - y[mask]).sum() / np.abs(y[mask]).sum())
    if mode == "per_cell":
        return float(np.mean(np.abs(y_hat[mask] - y[mask]) / np.abs(y[mask])))
    raise ValueError(f"unknown MRE mode {mode!r}")


# ---------------------------------------------------------------------------
# report

@dataclass
class MetricReport:
    target: str
    n_samples: int
    per_sample: dict[str, list[float]]
    mean: dict[str, float]
    std: dict[str, float]
    aoi_threshold: float
    mre_mode: str
    empty_aoi_samples: list[int] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)

    METRICS = ("r2", "rmse", "ssim", "mre")

    @staticmethod
    def from_per_sample(target, per_sample, aoi_threshold, mre_mode, empty_aoi,
                        config_echo=None):
        mean = {k: float(np.mean(v)) for k, v in per_sample.items()}
        std = {k: float(np.std(v)) for k, v in per_sample.items()}
        n = len(next(iter(per_sample.values())))
        return MetricReport(target=target, n_samples=n, per_sample=per_sample,
                            mean=mean, std=std, aoi_threshold=aoi_threshold,
                            mre_mode=mre_mode, empty_aoi_samples=list(empty_aoi),
                            config_echo=dict(config_echo or {}))

    def aggregates_consistent(self, tol: float = 1e-12) -> bool:
        for k, v in self.per_sample.items():
            if abs(self.mean[k] - float(np.mean(v))) > tol:
                return False
            if abs(self.std[k] - float(np.std(v))) > tol:
                return False
        return True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        d = json.loads(text)
        return MetricReport(**d)


# ---------------------------------------------------------------------------
# model-driven evaluation

def predict_sample(model: FfinoModel, sample: Sample, grid: Grid, target: str) -> np.ndarray:
    """All 12 report steps for one sample; saturation predictions are
    clamped to the physical range at evaluation time only."""
    sp = Tensor(spatial_features(sample, grid)[None], precision=model.precision)
    sc = Tensor(scalar_features(sample)[None], precision=model.precision)
    tm = Tensor(time_features(grid), precision=model.precision)
    with T.no_grad():
        out = model(sp, sc, tm).data[0]
    out = np.asarray(out, dtype=np.float64) * TARGET_SCALE[target]
    if target == "sg":
        out = np.clip(out, 0.0, 1.0)
    return out


def evaluate_predictions(refs: list[np.ndarray], preds: list[np.ndarray], target: str,
                         aoi: AOIConfig = AOIConfig(), mre_mode: str = "sum_ratio",
                         config_echo: dict | None = None) -> MetricReport:
    """Metric report from precomputed (reference, prediction) stacks,
    each [12, nr, nz]."""
    per = {k: [] for k in MetricReport.METRICS}
    empty = []
    thr = aoi.threshold(target)
    for i, (y, y_hat) in enumerate(zip(refs, preds)):
        y = np.asarray(y, dtype=np.float64)
        y_hat = np.asarray(y_hat, dtype=np.float64)
        per["r2"].append(r2(y, y_hat))
        per["rmse"].append(rmse(y, y_hat))
        per["ssim"].append(ssim_stack(y, y_hat))
        with warnings.catch_warnings(record=True) as wl:
            warnings.simplefilter("always")
            per["mre"].append(mre_aoi(y, y_hat, thr, mre_mode))
            if wl:
                empty.append(i)
    return MetricReport.from_per_sample(target, per, thr, mre_mode, empty, config_echo)


def evaluate(model: FfinoModel, samples: list[Sample], grid: Grid, target: str,
             out_dir=None, aoi: AOIConfig = AOIConfig(), mre_mode: str = "sum_ratio",
             max_images: int | None = 8, oracle_mode: bool = False) -> MetricReport:
    """Per-sample metrics over all 12 report steps plus optional artifacts
    (report JSON, per-sample CSV, heatmap panels, scatter-density CSV).

    ``oracle_mode`` feeds each reference through as its own prediction,
    exercising the metric/reporting path end to end.
    """
    if not samples:
        raise ValueError("empty evaluation set")
    refs = [np.asarray(getattr(s, target), dtype=np.float64) for s in samples]
    if oracle_mode:
        preds = [y.copy() for y in refs]
    else:
        preds = [predict_sample(model, s, grid, target) for s in samples]
    from dataclasses import asdict as _asdict
    echo = _asdict(model.config) if model is not None else {}
    echo["oracle_mode"] = oracle_mode
    report = evaluate_predictions(refs, preds, target, aoi, mre_mode, config_echo=echo)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json())
        with open(out_dir / "per_sample.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample"] + list(MetricReport.METRICS))
            for i in range(report.n_samples):
                w.writerow([i] + [repr(report.per_sample[k][i]) for k in MetricReport.METRICS])
        write_scatter_density(refs, preds, out_dir / "scatter_density.csv")
        n_img = report.n_samples if max_images is None else min(max_images, report.n_samples)
        for i in range(n_img):
            write_heatmap_panels(refs[i], preds[i], out_dir / f"sample{i:04d}.ppm")
    return report


# ---------------------------------------------------------------------------
# artifacts

def _build_colormap() -> np.ndarray:
    """256-entry RGB table: dark blue -> blue -> near-white -> orange ->
    dark red, linearly interpolated between the anchors below."""
    anchors = [
        (0.00, (10, 10, 90)),
        (0.35, (30, 110, 235)),
        (0.65, (240, 240, 245)),
        (0.85, (250, 160, 40)),
        (1.00, (128, 0, 0)),
    ]
    table = np.zeros((256, 3), dtype=np.uint8)
    xs = np.linspace(0.0, 1.0, 256)
    pos = np.array([a[0] for a in anchors])
    cols = np.array([a[1] for a in anchors], dtype=np.float64)
    for c in range(3):
        table[:, c] = np.clip(np.interp(xs, pos, cols[:, c]), 0, 255).astype(np.uint8)
    return table


COLORMAP = _build_colormap()


def _colorize(field: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    idx = np.clip((field - lo) / span * 255.0, 0, 255).astype(np.uint8)
    return COLORMAP[idx]


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 image from an [H, W, 3] uint8 array."""
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(rgb).tobytes())


def write_heatmap_panels(ref: np.ndarray, pred: np.ndarray, path) -> None:
    """One PPM per sample: rows are time steps, columns are
    [reference | prediction | error], rendered at native resolution with
    the fixed colormap (error symmetric around zero)."""
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    nt, nr, nz = ref.shape
    gap = 2
    panel_h, panel_w = nz, nr          # depth on rows, radius on columns
    height = nt * panel_h + (nt - 1) * gap
    width = 3 * panel_w + 2 * gap
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    lo = float(min(ref.min(), pred.min()))
    hi = float(max(ref.max(), pred.max()))
    err = pred - ref
    emax = float(np.abs(err).max()) or 1.0
    for s in range(nt):
        row0 = s * (panel_h + gap)
        panels = [
            _colorize(ref[s].T, lo, hi),
            _colorize(pred[s].T, lo, hi),
            _colorize(err[s].T, -emax, emax),
        ]
        for j, p in enumerate(panels):
            col0 = j * (panel_w + gap)
            img[row0:row0 + panel_h, col0:col0 + panel_w] = p
    write_ppm(path, img)


def write_scatter_density(refs, preds, path, bins: int = 64) -> None:
    """2-D histogram of reference vs prediction values, written as CSV
    rows (ref_bin_center, pred_bin_center, count), zero bins omitted."""
    y = np.concatenate([np.asarray(r).ravel() for r in refs])
    p = np.concatenate([np.asarray(q).ravel() for q in preds])
    lo = float(min(y.min(), p.min()))
    hi = float(max(y.max(), p.max()))
    if hi <= lo:
        hi = lo + 1.0
    hist, xe, ye = np.histogram2d(y, p, bins=bins, range=[[lo, hi], [lo, hi]])
    xc = 0.5 * (xe[:-1] + xe[1:])
    yc = 0.5 * (ye[:-1] + ye[1:])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ref_bin_center", "pred_bin_center", "count"])
        for i in range(bins):
            for j in range(bins):
                c = int(hist[i, j])
                if c:
                    w.writerow([repr(float(xc[i])), repr(float(yc[j])), c])
