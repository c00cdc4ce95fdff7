"""Acceptance suite: one test per criterion, each printing a PASS line
with its measured numbers when it succeeds (run with -s or -v to see
them live). Criteria 10 and 11 train real models and dominate runtime.
"""
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from ffino import tensor as T
from ffino import layers as L
from ffino import datagen as D
from ffino import model as M
from ffino import training as TR
from ffino import evaluation as E
from oracles import (check_grads, dense_spectral_conv2d,
                     dense_spectral_conv_factorized, lp_loss_scalar_loop,
                     ssim_per_window)

MU = dict(mu_g=0.0094, mu_w=0.547)

# desk-scale run settings for criteria 10 and 11 (seed-fixed)
OVERFIT = dict(data_seed=100, model_seed=0, batch_seed=2, lr_decay=0.999, steps=2000)
DESK = dict(train_n=256, test_n=32, train_seed=1001, test_seed=2002,
            model_seed=0, batch_times=2, lr_decay=0.985, epochs=50)


def _report(num, name, detail):
    print(f"[criterion {num:02d}] PASS {name}: {detail}")


def run_cli(*args, timeout=3900, env_extra=None):
    import os
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run([sys.executable, "-m", "ffino", *map(str, args)],
                          capture_output=True, text=True, timeout=timeout, env=env)


# ---------------------------------------------------------------------------

def test_criterion_01_spectral_conv_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(11)
    z = rng.standard_normal((2, 3, 8, 8))

    conv = L.SpectralConv2d(3, 2, 3, 3, (8, 8), rng, precision="double")
    conv.weight.data[...] = (rng.standard_normal((3, 3, 3, 2))
                             + 1j * rng.standard_normal((3, 3, 3, 2)))
    err2d = np.max(np.abs(conv(T.Tensor(z)).data
                          - dense_spectral_conv2d(z, conv.weight.data, 3, 3)))

    fact = L.FactorizedSpectralConv(3, 3, 3, 3, (8, 8), rng, precision="double")
    fact.weight_r.data[...] = (rng.standard_normal((3, 3, 3))
                               + 1j * rng.standard_normal((3, 3, 3)))
    fact.weight_z.data[...] = (rng.standard_normal((3, 3, 3))
                               + 1j * rng.standard_normal((3, 3, 3)))
    errf = np.max(np.abs(fact(T.Tensor(z)).data
                         - dense_spectral_conv_factorized(z, fact.weight_r.data,
                                                          fact.weight_z.data, 3, 3)))
    dt = time.time() - t0
    assert err2d < 1e-8, f"2-D spectral conv vs dense-DFT oracle: {err2d:.2e}"
    assert errf < 1e-8, f"factorized spectral conv vs dense-DFT oracle: {errf:.2e}"
    assert dt < 5.0, f"runtime {dt:.1f}s exceeds 5s"
    _report(1, "spectral-conv oracle equivalence",
            f"max abs err 2d={err2d:.2e} factorized={errf:.2e} in {dt:.2f}s")


def test_criterion_02_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(22)
    worst = {}

    def probe(out, seed):
        p = T.Tensor(np.random.default_rng(seed).standard_normal(out.shape))
        return T.tsum(T.mul(out, p))

    # linear (1e-6 bar)
    fnn = L.Fnn([3, 5, 2], rng, precision="double")
    x = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    probe(fnn(x), 1).backward()
    worst["linear"] = check_grads(lambda: probe(fnn(x), 1).item(),
                                  [x] + [p for _, p in fnn.named_params("f")], tol=1e-6)

    # elementwise (1e-6 bar)
    a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    T.tsum(T.mul(a, b)).backward()
    worst["elementwise"] = check_grads(lambda: T.tsum(T.mul(a, b)).item(), [a, b], tol=1e-6)

    # conv2d
    xc = T.Tensor(rng.standard_normal((2, 2, 6, 6)), requires_grad=True)
    conv = L.Conv2dLayer(2, 3, 3, rng, precision="double")
    probe(conv(xc), 2).backward()
    worst["conv2d"] = check_grads(lambda: probe(conv(xc), 2).item(),
                                  [xc] + [p for _, p in conv.named_params("c")], tol=1e-4)

    # U-Net depth 1
    unet = L.UNet(2, 1, rng, precision="double")
    xu = T.Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    probe(unet(xu), 3).backward()
    worst["unet"] = check_grads(lambda: probe(unet(xu), 3).item(),
                                [xu] + [p for _, p in unet.named_params("u")], tol=1e-4)

    # spectral convs
    sc = L.SpectralConv2d(2, 2, 3, 2, (6, 6), rng, precision="double")
    xs = T.Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    probe(sc(xs), 4).backward()
    worst["spectral2d"] = check_grads(lambda: probe(sc(xs), 4).item(),
                                      [xs, sc.weight], tol=1e-4)

    fc = L.FactorizedSpectralConv(2, 2, 3, 2, (6, 6), rng, precision="double")
    xf = T.Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    probe(fc(xf), 5).backward()
    worst["factorized"] = check_grads(lambda: probe(fc(xf), 5).item(),
                                      [xf, fc.weight_r, fc.weight_z], tol=1e-4)

    # full layer types
    ff = L.FFourierLayer(2, 3, 2, (6, 6), rng, precision="double")
    xl = T.Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    probe(ff(xl), 6).backward()
    worst["f_fourier"] = check_grads(lambda: probe(ff(xl), 6).item(),
                                     [xl] + [p for _, p in ff.named_params("f")], tol=1e-4)

    uf = L.UFourierLayer(2, 3, 2, (8, 8), rng, precision="double", unet_depth=1)
    xv = T.Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    probe(uf(xv), 7).backward()
    worst["u_fourier"] = check_grads(lambda: probe(uf(xv), 7).item(),
                                     [xv] + [p for _, p in uf.named_params("u")], tol=1e-4)

    # loss
    y = T.Tensor(rng.random((2, 4, 3)) + 0.5)
    yh = T.Tensor(y.data + 0.2 * rng.standard_normal(y.shape), requires_grad=True)
    TR.lp_loss(y, yh).backward()
    worst["lp_loss"] = check_grads(lambda: TR.lp_loss(y, yh).item(), [yh], tol=1e-4)

    dt = time.time() - t0
    assert dt < 120.0, f"gradient suite took {dt:.1f}s, budget 120s"
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    _report(2, "gradient suite", f"{detail} in {dt:.1f}s")


def test_criterion_03_shape_suite():
    t0 = time.time()
    cfg = M.ModelConfig()          # width 36, grid 192x64, 3 F + 3 U layers
    model = M.FfinoModel(cfg, seed=0)
    rng = np.random.default_rng(33)
    sp = T.Tensor(rng.random((4, 5, 192, 64)), precision="single")
    sc = T.Tensor(rng.random((4, 7)), precision="single")
    tm = T.Tensor(rng.random((4, 1)), precision="single")
    trace = []
    with T.no_grad():
        out = model(sp, sc, tm, trace=trace)
    shapes = dict(trace)

    # element counts per published structure table row
    expected = {
        "branch1": 4 * 64 * 192 * 36,
        "branch2": 4 * 36,
        "branch_merger": 4 * 64 * 192 * 36,
        "trunk": 4 * 36,
        "branch_trunk_merger": 16 * 36 * 192 * 64,
        "projection1": 16 * 192 * 64 * 36,
        "f_fourier1": 16 * 192 * 64 * 36,
        "f_fourier2": 16 * 192 * 64 * 36,
        "f_fourier3": 16 * 192 * 64 * 36,
        "u_fourier1": 16 * 192 * 64 * 36,
        "u_fourier2": 16 * 192 * 64 * 36,
        "u_fourier3": 16 * 192 * 64 * 36,
        "projection2": 16 * 192 * 64 * 128,
        "projection3": 16 * 192 * 64 * 1,
        "output": 4 * 4 * 192 * 64,
    }
    for key, count in expected.items():
        assert key in shapes, f"missing stage {key}"
        got = int(np.prod(shapes[key]))
        assert got == count, f"{key}: {got} elements, expected {count}"
    assert shapes["branch_trunk_merger"] == (16, 36, 192, 64)
    assert shapes["output"] == (4, 4, 192, 64)
    dt = time.time() - t0
    assert dt < 30.0, f"shape suite took {dt:.1f}s, budget 30s"
    _report(3, "structure-table shape suite", f"15 stages verified in {dt:.1f}s")


def test_criterion_04_parameter_accounting():
    rng = np.random.default_rng(44)
    for i in range(10):
        cfg = M.ModelConfig(
            width=int(rng.integers(4, 14)),
            modes_r=int(rng.integers(2, 6)),
            modes_z=int(rng.integers(2, 5)),
            n_f_fourier=int(rng.integers(1, 4)),
            m_u_fourier=int(rng.integers(1, 4)),
            projection_width=int(rng.integers(8, 64)),
            branch_hidden=tuple(int(rng.integers(4, 32))
                                for _ in range(int(rng.integers(1, 3)))),
            grid_nr=16, grid_nz=8,
            unet_depth=int(rng.integers(0, 3)),
        )
        model = M.FfinoModel(cfg, seed=i)
        enum = model.param_count()
        analytic = M.analytic_param_count(cfg)
        assert enum == analytic, f"config {i}: enumerated {enum} != analytic {analytic}"

    base = dict(width=16, modes_r=16, modes_z=9, grid_nr=192, grid_nz=64)
    n_ffino = M.analytic_param_count(M.ModelConfig(decoder_preset="ffino", **base))
    n_fmio = M.analytic_param_count(M.ModelConfig(decoder_preset="fmionet_like", **base))
    assert n_ffino < n_fmio
    _report(4, "parameter accounting",
            f"10 configs exact; ffino={n_ffino} < fmionet_like={n_fmio} "
            f"({100 * (1 - n_ffino / n_fmio):.1f}% fewer)")


def test_criterion_05_loss_oracle():
    rng = np.random.default_rng(55)
    cfg = TR.LossConfig(p=2.0, beta=0.5)
    worst = 0.0
    for _ in range(50):
        shape = (int(rng.integers(1, 4)), int(rng.integers(3, 7)), int(rng.integers(2, 6)))
        y = rng.random(shape) + 0.5
        yh = y + 0.4 * rng.standard_normal(shape)
        ours = TR.lp_loss(T.Tensor(y), T.Tensor(yh), cfg).item()
        ref = lp_loss_scalar_loop(y, yh, cfg.p, cfg.beta)
        worst = max(worst, abs(ours - ref))
    assert worst < 1e-6, f"loss vs scalar-loop oracle: {worst:.2e}"

    y = rng.random((2, 5, 4)) + 0.5
    assert TR.lp_loss(T.Tensor(y), T.Tensor(y.copy()), cfg).item() == 0.0

    yh = y + 0.2 * rng.standard_normal(y.shape)
    base = TR.lp_loss(T.Tensor(y), T.Tensor(yh), cfg).item()
    scale_err = max(abs(TR.lp_loss(T.Tensor(c * y), T.Tensor(c * yh), cfg).item() - base)
                    for c in (5.0, -0.3, 1e3))
    assert scale_err < 1e-10, f"scale invariance violated: {scale_err:.2e}"
    _report(5, "loss oracle", f"50 pairs max err {worst:.2e}; identity 0; "
            f"scale invariance {scale_err:.2e}")


def test_criterion_06_mbc_suite():
    t0 = time.time()
    rng = np.random.default_rng(66)
    # endpoint identities, exact
    for c in D.LITERATURE_RELPERM_CASES.values():
        krw, krg = D.mbc_eval(np.array([c.swi, 1 - c.sgr]), c)
        assert krw[0] == 0.0 and krg[0] == c.krg_max
        assert krw[1] == c.krw_max and krg[1] == 0.0
    # monotonicity over 1000 random draws
    sw = np.linspace(0, 1, 100)
    for _ in range(1000):
        c = D.RelPermCoeffs(rng.uniform(0.2, 1), rng.uniform(0.01, 1),
                            rng.uniform(0, 0.55), rng.uniform(0, 0.35),
                            rng.uniform(0.2, 6), rng.uniform(0.2, 6))
        krw, krg = D.mbc_eval(sw, c)
        assert np.all(np.diff(krw) >= -1e-15) and np.all(np.diff(krg) <= 1e-15)
    # recovery of all three published cases from noiseless 50-point curves
    init = D.RelPermCoeffs(0.65, 0.043, 0.42, 0.075, 2.6, 2.2)
    worst = 0.0
    for c in D.LITERATURE_RELPERM_CASES.values():
        s = np.linspace(c.swi, 1 - c.sgr, 50)
        krw, krg = D.mbc_eval(s, c)
        fit = D.mbc_fit(np.column_stack([s, krw, krg]), init)
        rel = np.max(np.abs(fit.as_array() - c.as_array()) / np.abs(c.as_array()))
        worst = max(worst, rel)
    assert worst < 0.02, f"curve-fit recovery {worst:.3%} outside 2%"
    dt = time.time() - t0
    assert dt < 30.0
    _report(6, "relperm curve suite",
            f"endpoints exact, 1000-draw monotonicity, recovery {worst:.2e} in {dt:.1f}s")


def test_criterion_07_lhs_stratification():
    for n in (10, 100, 1000):
        x = D.lhs_sample(n, D.SCALAR_RANGES, seed=n + 5)
        for j, (lo, hi) in enumerate(D.SCALAR_RANGES.values()):
            strata = np.clip(np.floor((x[:, j] - lo) / (hi - lo) * n).astype(int), 0, n - 1)
            assert np.array_equal(np.sort(strata), np.arange(n)), f"n={n} dim={j}"
    x = D.lhs_sample(1000, D.SCALAR_RANGES, seed=99)
    worst = 0.0
    for j, (lo, hi) in enumerate(D.SCALAR_RANGES.values()):
        worst = max(worst, abs(x[:, j].mean() - 0.5 * (lo + hi)) / (hi - lo))
    assert worst < 0.02
    _report(7, "LHS stratification", f"n in {{10,100,1000}} exact; "
            f"1000-sample mean offset max {worst:.3%} of range")


def test_criterion_08_field_statistics():
    t0 = time.time()
    kh_all = []
    for i in range(500):
        rngs = D._sample_rngs(777, i)
        rng_kh = rngs[1]
        params = D.FractalFieldParams(
            k_base=float(np.exp(rng_kh.uniform(np.log(150.0), np.log(500.0)))),
            hurst=float(rng_kh.uniform(0.3, 0.9)),
            anisotropy_ratio=float(rng_kh.uniform(0.3, 1.0)),
            rotation=float(rng_kh.uniform(0.0, math.pi)))
        kh_all.append(D.fractal_kh(rng_kh, params, 192, 64))
    kh = np.stack(kh_all)
    assert kh.min() >= 44.1 and kh.max() <= 1000.0
    assert 250.0 <= kh.mean() <= 400.0, f"pooled kh mean {kh.mean():.1f} outside [250,400]"

    aniso = np.concatenate([D.aniso_map(s, 192, 64).ravel() for s in range(500)])
    assert abs(aniso.mean() - 0.305) < 0.03, f"aniso mean {aniso.mean():.4f}"
    assert abs(aniso.std() - 0.134) < 0.03, f"aniso std {aniso.std():.4f}"
    dt = time.time() - t0
    assert dt < 120.0, f"field statistics took {dt:.1f}s, budget 120s"
    _report(8, "field statistics",
            f"kh mean {kh.mean():.1f} in [250,400]; aniso mean {aniso.mean():.3f} "
            f"std {aniso.std():.3f} in {dt:.1f}s")


def test_criterion_09_welge_oracle():
    rng = np.random.default_rng(99)
    cases = list(D.LITERATURE_RELPERM_CASES.values())
    for _ in range(100):
        cases.append(D.RelPermCoeffs(
            rng.uniform(*D.SCALAR_RANGES["krw_max"]), rng.uniform(*D.SCALAR_RANGES["krg_max"]),
            rng.uniform(*D.SCALAR_RANGES["swi"]), rng.uniform(*D.SCALAR_RANGES["sgr"]),
            rng.uniform(*D.SCALAR_RANGES["m"]), rng.uniform(*D.SCALAR_RANGES["n"])))
    worst = 0.0
    for c in cases:
        s, _ = D.welge_front(c, **MU)
        grid = np.linspace(1e-9, 1 - c.swi, 100_000)
        brute = grid[np.argmax(D.fractional_flow(grid, c, **MU) / grid)]
        worst = max(worst, abs(s - brute))
    assert worst < 1e-4, f"tangent vs brute-force chord max deviation {worst:.2e}"
    _report(9, "front-tangent oracle", f"103 coefficient sets, max |dS| {worst:.2e}")


def test_criterion_10_overfit(tmp_path):
    t0 = time.time()
    grid = D.make_grid(48, 16)
    ds = D.generate_dataset(4, seed=OVERFIT["data_seed"], grid=grid,
                            path=tmp_path / "tiny.fds")
    out = tmp_path / "overfit.fck"
    r = run_cli("--threads", 1, "train", "--data", tmp_path / "tiny.fds",
                "--target", "sg", "--epochs", OVERFIT["steps"],
                "--seed", OVERFIT["model_seed"], "--out", out,
                "--width", 8, "--modes-r", 8, "--modes-z", 4,
                "--projection-width", 32, "--batch-samples", 4, "--batch-times", 4,
                "--lr-decay", OVERFIT["lr_decay"], "--quiet", timeout=595)
    assert r.returncode == 0, r.stderr
    rows = (tmp_path / "overfit.fck.loss.csv").read_text().strip().splitlines()[1:]
    losses = [float(line.split(",")[2]) for line in rows]
    best = min(losses)
    dt = time.time() - t0
    assert best < 0.05, f"overfit train loss bottomed at {best:.4f}, need < 0.05"
    assert dt < 600.0, f"overfit run took {dt:.0f}s, budget 600s"
    _report(10, "overfit check",
            f"min train loss {best:.4f} within {len(losses)} steps, {dt:.0f}s single thread")


def test_criterion_11_desk_scale_generalization(tmp_path):
    t0 = time.time()
    grid_args = []   # default 192x64
    train_fds = tmp_path / "train.fds"
    test_fds = tmp_path / "test.fds"
    r = run_cli("gen-data", "--n", DESK["train_n"], "--seed", DESK["train_seed"],
                "--out", train_fds)
    assert r.returncode == 0, r.stderr
    r = run_cli("gen-data", "--n", DESK["test_n"], "--seed", DESK["test_seed"],
                "--out", test_fds)
    assert r.returncode == 0, r.stderr

    results = {}
    for target in ("sg", "dp"):
        ckpt = tmp_path / f"desk_{target}.fck"
        r = run_cli("train", "--data", train_fds, "--target", target,
                    "--epochs", DESK["epochs"], "--seed", DESK["model_seed"],
                    "--out", ckpt, "--width", 16, "--modes-r", 16, "--modes-z", 9,
                    "--batch-samples", 4, "--batch-times", DESK["batch_times"],
                    "--lr-decay", DESK["lr_decay"], "--quiet", timeout=3500)
        assert r.returncode == 0, r.stderr
        out_dir = tmp_path / f"eval_{target}"
        r = run_cli("eval", "--ckpt", ckpt, "--data", test_fds, "--target", target,
                    "--out-dir", out_dir, "--max-images", 2)
        assert r.returncode == 0, r.stderr
        rep = json.loads((out_dir / "report.json").read_text())
        results[target] = (rep["mean"]["r2"], rep["mean"]["mre"])

    dt = time.time() - t0
    for target, (r2_mean, mre_mean) in results.items():
        assert r2_mean >= 0.95, f"{target}: test R^2 {r2_mean:.4f} < 0.95"
        assert mre_mean <= 0.10, f"{target}: test MRE {mre_mean:.4f} > 0.10"
    assert dt < 3600.0, f"desk-scale run took {dt:.0f}s, budget 3600s"
    _report(11, "desk-scale generalization",
            "; ".join(f"{t}: R2={v[0]:.4f} MRE={v[1]:.4f}" for t, v in results.items())
            + f"; total {dt:.0f}s")


def test_criterion_12_determinism_and_roundtrips(tmp_path):
    # dataset generation bit-identical
    for name in ("d1.fds", "d2.fds"):
        r = run_cli("--threads", 1, "gen-data", "--n", 3, "--seed", 77,
                    "--out", tmp_path / name, "--grid-nr", 24, "--grid-nz", 12)
        assert r.returncode == 0, r.stderr
    assert (tmp_path / "d1.fds").read_bytes() == (tmp_path / "d2.fds").read_bytes()

    # training bit-identical in single-thread mode
    for name in ("m1.fck", "m2.fck"):
        r = run_cli("--threads", 1, "train", "--data", tmp_path / "d1.fds",
                    "--target", "sg", "--epochs", 2, "--seed", 5,
                    "--out", tmp_path / name, "--width", 4, "--modes-r", 3,
                    "--modes-z", 2, "--projection-width", 8,
                    "--batch-samples", 2, "--batch-times", 2, "--quiet")
        assert r.returncode == 0, r.stderr
    assert (tmp_path / "m1.fck").read_bytes() == (tmp_path / "m2.fck").read_bytes()

    # evaluation bit-identical
    for name in ("e1", "e2"):
        r = run_cli("--threads", 1, "eval", "--ckpt", tmp_path / "m1.fck",
                    "--data", tmp_path / "d1.fds", "--out-dir", tmp_path / name)
        assert r.returncode == 0, r.stderr
    assert ((tmp_path / "e1" / "report.json").read_bytes()
            == (tmp_path / "e2" / "report.json").read_bytes())

    # file-format round trips: read -> write reproduces bytes
    ds = D.read_dataset(tmp_path / "d1.fds")
    D.write_dataset(ds, tmp_path / "d1b.fds")
    assert (tmp_path / "d1.fds").read_bytes() == (tmp_path / "d1b.fds").read_bytes()
    model = M.load_checkpoint(tmp_path / "m1.fck")
    M.save_checkpoint(model, tmp_path / "m1b.fck")
    assert (tmp_path / "m1.fck").read_bytes() == (tmp_path / "m1b.fck").read_bytes()
    _report(12, "determinism & round trips",
            "gen-data/train/eval bit-identical; FDS1+FCK1 round-trip byte-exact")


def test_criterion_13_metric_unit_tests():
    y = np.random.default_rng(0).random(20)
    assert E.r2(y, y.copy()) == 1.0
    assert abs(E.r2(y, np.full_like(y, y.mean()))) < 1e-12
    assert abs(E.rmse([0.0, 0.0], [3.0, 4.0]) - 3.5355339059327378) < 1e-10

    rng = np.random.default_rng(1)
    from scipy.signal import convolve2d
    f = convolve2d(rng.random((16, 16)), np.ones((3, 3)) / 9, mode="same", boundary="symm")
    assert abs(E.ssim(f, f.copy()) - 1.0) < 1e-12
    shifted = f + 0.25 * (f.max() - f.min())
    assert abs(E.ssim(f, shifted) - ssim_per_window(f, shifted)) < 1e-8

    assert abs(E.mre_aoi(np.array([0.005, 0.5]), np.array([0.9, 0.4]),
                         threshold=0.01) - 0.2) < 1e-12
    _report(13, "metric unit tests", "R2 1/0, RMSE 3.5355, SSIM identity & shift, MRE 0.2")
