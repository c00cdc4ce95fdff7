"""Training: the relative lp loss with its radial-derivative term, the
adaptive-moment optimizer, and the (sample x time) batched epoch loop
with checkpointing and a CSV loss log.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .datagen import Dataset, Grid, Sample
from .model import (TARGET_SCALE, FfinoModel, save_checkpoint, scalar_features,
                    spatial_features, time_features)
from .tensor import ShapeError, Tensor

__all__ = [
    "LossConfig",
    "TrainConfig",
    "NonFiniteError",
    "TrainingDiverged",
    "lp_loss",
    "Adam",
    "clip_global_norm",
    "sample_time_subset",
    "train",
]


class NonFiniteError(FloatingPointError):
    """A gradient or loss went non-finite; carries the parameter name."""


class TrainingDiverged(RuntimeError):
    """Training aborted on a non-finite loss; last checkpoint is retained."""


@dataclass(frozen=True)
class LossConfig:
    p: float = 2.0
    beta: float = 0.5

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("norm order p must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.985
    epochs: int = 50
    batch_samples: int = 4      # B_S
    batch_times: int = 4        # B_T
    seed: int = 0
    target: str = "sg"
    clip_norm: float | None = 10.0
    checkpoint_every: int = 0   # 0 -> epochs // 5

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not (0 < self.lr_decay <= 1):
            raise ValueError("lr_decay must lie in (0, 1]")
        if not (1 <= self.batch_times <= 12):
            raise ValueError("batch_times must lie in [1, 12]")
        if self.batch_samples < 1 or self.epochs < 1:
            raise ValueError("batch_samples and epochs must be >= 1")
        if self.target not in ("sg", "dp"):
            raise ValueError("target must be 'sg' or 'dp'")


# ---------------------------------------------------------------------------
# loss

def _per_element_norm(x: Tensor, p: float) -> Tensor:
    """||x||_p per batch element (axis 0), realized as (sum (x^2)^(p/2))^(1/p)."""
    sq = T.mul(x, x)
    if p != 2.0:
        sq = T.power(sq, p / 2.0)
    axes = tuple(range(1, x.ndim))
    s = T.tsum(sq, axis=axes)
    return T.power(s, 1.0 / p) if p != 2.0 else T.sqrt(s)


def _r_diff(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    return T.sub(T.narrow(x, axis, 1, n - 1), T.narrow(x, axis, 0, n - 1))


def lp_loss(y: Tensor, y_hat: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Relative p-norm of the error plus beta times the relative p-norm of
    its forward-difference derivative along the radial index axis
    (second-to-last axis); each term is computed per batch element and
    averaged over the batch.
    """
    if y.shape != y_hat.shape:
        raise ShapeError(f"loss operands differ in shape: {y.shape} vs {y_hat.shape}")
    if y.ndim < 3:
        y = T.reshape(y, (1,) + y.shape)
        y_hat = T.reshape(y_hat, (1,) + y_hat.shape)
    r_axis = y.ndim - 2 if y.ndim >= 3 else y.ndim - 1

    flat = np.abs(y.data.reshape(y.shape[0], -1)) ** cfg.p
    if np.any(flat.sum(axis=1) == 0):
        raise ValueError("degenerate reference: some batch element is identically zero")

    diff = T.sub(y, y_hat)
    term = T.mean(T.div(_per_element_norm(diff, cfg.p), _per_element_norm(y, cfg.p)))
    if cfg.beta == 0.0:
        return term

    dy = _r_diff(y, r_axis)
    dflat = np.abs(dy.data.reshape(dy.shape[0], -1)) ** cfg.p
    if np.any(dflat.sum(axis=1) == 0):
        raise ValueError("degenerate reference: radial derivative is identically zero")
    dh = _r_diff(y_hat, r_axis)
    dterm = T.mean(T.div(_per_element_norm(T.sub(dy, dh), cfg.p),
                         _per_element_norm(dy, cfg.p)))
    return T.add(term, dterm * cfg.beta)


# ---------------------------------------------------------------------------
# optimizer

def _float_view(arr: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(arr):
        return arr.view(np.float32 if arr.dtype == np.complex64 else np.float64)
    return arr


class Adam:
    """Bias-corrected adaptive-moment descent. Complex parameters update
    through their interleaved re/im float view."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(_float_view(p.data)) for _, p in self.named_params]
        self.v = [np.zeros_like(_float_view(p.data)) for _, p in self.named_params]

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            gv = _float_view(np.ascontiguousarray(g))
            if not np.all(np.isfinite(gv)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
            m *= self.beta1
            m += (1.0 - self.beta1) * gv
            v *= self.beta2
            v += (1.0 - self.beta2) * gv * gv
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            pv = _float_view(p.data)
            pv -= update.astype(pv.dtype, copy=False)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients down if their joint L2 norm exceeds max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            gv = _float_view(p.grad)
            total += float((gv.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# batching

def sample_time_subset(rng: np.random.Generator, n_times: int, batch_times: int) -> np.ndarray:
    """Random time-index subset without replacement for one step."""
    return np.sort(rng.choice(n_times, size=batch_times, replace=False))


def _features(samples: list[Sample], grid: Grid, target: str):
    spatial = np.stack([spatial_features(s, grid) for s in samples]).astype(np.float32)
    scalars = np.stack([scalar_features(s) for s in samples]).astype(np.float32)
    targets = (np.stack([getattr(s, target) for s in samples])
               / TARGET_SCALE[target]).astype(np.float32)
    return spatial, scalars, targets


def train(samples: list[Sample] | Dataset, model: FfinoModel, cfg: TrainConfig,
          loss_cfg: LossConfig = LossConfig(), grid: Grid | None = None,
          ckpt_path=None, log_path=None, verbose: bool = False):
    """Train the model on the given samples; returns (model, log rows).

    Each step draws ``batch_samples`` shuffled samples and an independent
    random subset of ``batch_times`` report times. The learning rate is
    lr0 * lr_decay^epoch. A checkpoint is written every k epochs and at
    the end; a non-finite loss aborts with the last checkpoint retained.
    """
    if isinstance(samples, Dataset):
        grid = samples.grid
        samples = samples.samples
    if grid is None:
        raise ValueError("grid required when passing a raw sample list")
    if not samples:
        raise ValueError("empty training set")

    spatial_np, scalars_np, targets_np = _features(samples, grid, cfg.target)
    times_all = time_features(grid).astype(np.float32)
    n = len(samples)
    n_times = times_all.shape[0]
    bt = min(cfg.batch_times, n_times)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.named_parameters())
    params = model.parameters()
    ckpt_every = cfg.checkpoint_every or max(1, cfg.epochs // 5)

    log_rows = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr0 * cfg.lr_decay ** epoch
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_samples):
            idx = perm[start:start + cfg.batch_samples]
            tidx = sample_time_subset(rng, n_times, bt)
            sp = Tensor(spatial_np[idx], precision=model.precision)
            sc = Tensor(scalars_np[idx], precision=model.precision)
            tm = Tensor(times_all[tidx], precision=model.precision)
            truth = targets_np[idx][:, tidx]
            bsz = len(idx) * bt
            y = Tensor(truth.reshape(bsz, *truth.shape[2:]), precision=model.precision)

            pred = model(sp, sc, tm)
            y_hat = T.reshape(pred, (bsz,) + pred.shape[2:])
            loss = lp_loss(y, y_hat, loss_cfg)
            step_loss = loss.item()
            if not math.isfinite(step_loss):
                raise TrainingDiverged(
                    f"non-finite loss {step_loss} at epoch {epoch}; last checkpoint retained")
            T.zero_grads(params)
            loss.backward()
            if cfg.clip_norm:
                clip_global_norm(params, cfg.clip_norm)
            opt.step(lr)
            losses.append(step_loss)

        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
        log_rows.append(row)
        if verbose:
            print(f"epoch {epoch:4d}  lr {lr:.3e}  loss {row['train_loss']:.5f}", flush=True)
        if ckpt_path is not None and ((epoch + 1) % ckpt_every == 0 or epoch == cfg.epochs - 1):
            save_checkpoint(model, ckpt_path)

    if ckpt_path is not None:
        save_checkpoint(model, ckpt_path)
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "lr", "train_loss"])
            for row in log_rows:
                w.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"])])
    return model, log_rows
