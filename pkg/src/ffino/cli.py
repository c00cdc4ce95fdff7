"""Command-line entry point tying the pipeline together.

Subcommands: gen-data, fit-relperm, train, eval, predict, bench. Every
run is seed-deterministic and writes a JSON run manifest (resolved
config, seeds, input/output digests, timings). Exit codes: 0 success,
2 configuration error, 3 I/O error, 4 numerical failure.

numpy and the library modules are imported lazily so ``--threads`` can
pin the BLAS thread count through the environment before numpy loads.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

ARTIFACT_VERSION = "0.1.0"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _default_seed() -> int:
    return int(os.environ.get("FFINO_SEED", "0"))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, subcommand: str, config: dict, seeds: dict,
                    inputs: list, outputs: list, t0: float, threads: int) -> None:
    manifest = {
        "subcommand": subcommand,
        "artifact_version": ARTIFACT_VERSION,
        "resolved_config": config,
        "seeds": seeds,
        "threads": threads,
        "inputs": {str(p): _sha256(p) for p in inputs if os.path.exists(p)},
        "outputs": {str(p): _sha256(p) for p in outputs if os.path.exists(p)},
        "wall_clock_s": time.time() - t0,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)


def _apply_threads(threads: int) -> None:
    if threads > 0:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def _fft_workers(threads: int) -> int:
    if threads > 0:
        return threads
    return min(4, os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffino",
                                description="Spectral neural-operator surrogate pipeline")
    p.add_argument("--threads", type=int, default=0,
                   help="worker threads (1 = fully deterministic mode; 0 = library default)")
    p.add_argument("--config", type=str, default=None,
                   help="JSON file with defaults; explicit flags override")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset (FDS1)")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", type=str, required=True)
    g.add_argument("--grid-nr", type=int, default=192)
    g.add_argument("--grid-nz", type=int, default=64)
    g.add_argument("--relperm-json", type=str, default=None,
                   help="pin curve coefficients from fit-relperm output")

    f = sub.add_parser("fit-relperm", help="fit curve coefficients to CSV points")
    f.add_argument("--points", type=str, required=True, help="CSV with columns Sw,krw,krg")
    f.add_argument("--out", type=str, required=True)

    t = sub.add_parser("train", help="train a model on an FDS1 dataset")
    t.add_argument("--data", type=str, required=True)
    t.add_argument("--target", choices=["sg", "dp"], required=True)
    t.add_argument("--preset", choices=["ffino", "fmionet_like"], default="ffino")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", type=str, required=True)
    t.add_argument("--width", type=int, default=36)
    t.add_argument("--modes-r", type=int, default=32)
    t.add_argument("--modes-z", type=int, default=17)
    t.add_argument("--batch-samples", type=int, default=4)
    t.add_argument("--batch-times", type=int, default=4)
    t.add_argument("--lr0", type=float, default=1e-3)
    t.add_argument("--lr-decay", type=float, default=0.985)
    t.add_argument("--projection-width", type=int, default=128)
    t.add_argument("--log", type=str, default=None, help="loss log CSV path")
    t.add_argument("--split", choices=["all", "train"], default="all",
                   help="use every sample or only the leading train split")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", type=str, required=True)
    e.add_argument("--data", type=str, required=True)
    e.add_argument("--target", choices=["sg", "dp"], default=None,
                   help="defaults to the target stored in the checkpoint")
    e.add_argument("--out-dir", type=str, required=True)
    e.add_argument("--split", choices=["all", "test"], default="all")
    e.add_argument("--max-images", type=int, default=8)
    e.add_argument("--mre-mode", choices=["sum_ratio", "per_cell"], default="sum_ratio")
    e.add_argument("--oracle", action="store_true",
                   help="feed references through as predictions (metric-path test mode)")

    pr = sub.add_parser("predict", help="reference/prediction/error panels for one sample")
    pr.add_argument("--ckpt", type=str, required=True)
    pr.add_argument("--data", type=str, required=True)
    pr.add_argument("--sample-index", type=int, required=True)
    pr.add_argument("--target", choices=["sg", "dp"], default=None)
    pr.add_argument("--out-dir", type=str, required=True)

    b = sub.add_parser("bench", help="inference timing per sample")
    b.add_argument("--ckpt", type=str, required=True)
    b.add_argument("--data", type=str, required=True)
    b.add_argument("--repeats", type=int, default=5)

    p._ffino_subparsers = [g, f, t, e, pr, b]   # config defaults reach these too
    return p


def _load_config_defaults(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Fold --config JSON values in as parser defaults (flags still win)."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", type=str, default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config:
        with open(known.config) as f:
            cfg = json.load(f)
        if not isinstance(cfg, dict):
            raise ValueError("--config must contain a JSON object")
        defaults = {k.replace("-", "_"): v for k, v in cfg.items()}
        parser.set_defaults(**defaults)
        for sp in getattr(parser, "_ffino_subparsers", []):
            sp.set_defaults(**defaults)
    return argv


# ---------------------------------------------------------------------------
# subcommands (library imports stay inside so --threads can act first)

def _cmd_gen_data(args, threads) -> int:
    from . import datagen as D
    t0 = time.time()
    seed = args.seed if args.seed is not None else _default_seed()
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    coeffs = None
    if args.relperm_json:
        with open(args.relperm_json) as f:
            blob = json.load(f)
        blob = blob.get("coefficients", blob)
        coeffs = D.RelPermCoeffs(**{k: float(blob[k])
                                    for k in ("krw_max", "krg_max", "swi", "sgr", "m", "n")})
    grid = D.make_grid(args.grid_nr, args.grid_nz)
    ds = D.generate_dataset(args.n, seed, path=args.out, grid=grid, coeffs_override=coeffs)
    print(f"wrote {args.out}: {len(ds)} samples on a {grid.nr}x{grid.nz} grid")
    print(f"{'variable':>10} {'min':>12} {'max':>12} {'mean':>12} {'std':>12}")
    for row in D.dataset_summary(ds):
        print(f"{row['variable']:>10} {row['min']:>12.4g} {row['max']:>12.4g} "
              f"{row['mean']:>12.4g} {row['std']:>12.4g}")
    config = {"n": args.n, "seed": seed, "grid_nr": args.grid_nr, "grid_nz": args.grid_nz,
              "relperm_json": args.relperm_json}
    _write_manifest(str(args.out) + ".manifest.json", "gen-data", config,
                    {"seed": seed}, [args.relperm_json] if args.relperm_json else [],
                    [args.out], t0, threads)
    return EXIT_OK


def _parse_points_csv(path):
    import numpy as np
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if lineno == 1 and parts[0].lower() in ("sw", "s_w"):
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns (Sw,krw,krg), "
                                 f"got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: non-numeric value ({e})") from e
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.asarray(rows)


def _cmd_fit_relperm(args, threads) -> int:
    from . import datagen as D
    t0 = time.time()
    pts = _parse_points_csv(args.points)
    init = D.RelPermCoeffs(0.65, 0.043, 0.42, 0.075, 2.6, 2.2)   # range midpoints
    fit = D.mbc_fit(pts, init)
    krw, krg = D.mbc_eval(pts[:, 0], fit)
    import numpy as np
    residual = float(np.sqrt(np.sum((krw - pts[:, 1]) ** 2 + (krg - pts[:, 2]) ** 2)))
    out = {
        "coefficients": {k: float(v) for k, v in
                         zip(("krw_max", "krg_max", "swi", "sgr", "m", "n"), fit.as_array())},
        "residual": residual,
        "n_points": int(pts.shape[0]),
    }
    with open(args.out, "w") as f:
        json.dump(out, f, indent=2)
    print(f"fit {pts.shape[0]} points, residual {residual:.3e}")
    for k, v in out["coefficients"].items():
        print(f"  {k:>8} = {v:.6g}")
    _write_manifest(str(args.out) + ".manifest.json", "fit-relperm",
                    {"points": args.points}, {}, [args.points], [args.out], t0, threads)
    return EXIT_OK


def _model_config_from_args(args, grid):
    from .model import ModelConfig
    return ModelConfig(width=args.width, modes_r=args.modes_r, modes_z=args.modes_z,
                       decoder_preset=args.preset, projection_width=args.projection_width,
                       grid_nr=grid.nr, grid_nz=grid.nz, target=args.target)


def _cmd_train(args, threads) -> int:
    import resource

    from . import datagen as D
    from . import training as TR
    from .model import FfinoModel, analytic_param_count

    t0 = time.time()
    seed = args.seed if args.seed is not None else _default_seed()
    ds = D.read_dataset(args.data)
    samples = ds.samples if args.split == "all" else D.split_dataset(ds)[0]
    mcfg = _model_config_from_args(args, ds.grid)
    model = FfinoModel(mcfg, seed=seed)
    n_params = model.param_count()
    assert n_params == analytic_param_count(mcfg)
    print(f"model: preset={args.preset} width={args.width} "
          f"modes=({args.modes_r},{args.modes_z}) parameters={n_params}")

    tcfg = TR.TrainConfig(lr0=args.lr0, epochs=args.epochs, batch_samples=args.batch_samples,
                          batch_times=args.batch_times, seed=seed, target=args.target,
                          lr_decay=args.lr_decay)
    log_path = args.log or (str(args.out) + ".loss.csv")
    _, log = TR.train(samples, model, tcfg, grid=ds.grid, ckpt_path=args.out,
                      log_path=log_path, verbose=not args.quiet)
    wall = time.time() - t0
    peak_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    print(f"trained {args.epochs} epochs in {wall:.1f}s "
          f"({wall / max(args.epochs, 1):.2f} s/epoch), peak memory ~{peak_mb:.0f} MiB")
    print(f"final train loss {log[-1]['train_loss']:.5f}")

    config = {k: getattr(args, k) for k in
              ("data", "target", "preset", "epochs", "width", "modes_r", "modes_z",
               "batch_samples", "batch_times", "lr0", "lr_decay", "projection_width",
               "split")}
    config["seed"] = seed
    config["parameters"] = n_params
    _write_manifest(str(args.out) + ".manifest.json", "train", config, {"seed": seed},
                    [args.data], [args.out, log_path], t0, threads)
    return EXIT_OK


def _load_for_eval(args):
    from . import datagen as D
    from .model import load_checkpoint
    ds = D.read_dataset(args.data)
    model = load_checkpoint(args.ckpt)
    mg = (model.config.grid_nr, model.config.grid_nz)
    dg = (ds.grid.nr, ds.grid.nz)
    if mg != dg:
        raise ValueError(f"checkpoint grid {mg} does not match dataset grid {dg}")
    return ds, model


def _cmd_eval(args, threads) -> int:
    from . import datagen as D
    from . import evaluation as E
    t0 = time.time()
    ds, model = _load_for_eval(args)
    target = args.target or model.config.target
    samples = ds.samples if args.split == "all" else D.split_dataset(ds)[1]
    if not samples:
        raise ValueError("selected split is empty")
    rep = E.evaluate(model, samples, ds.grid, target, out_dir=args.out_dir,
                     mre_mode=args.mre_mode, max_images=args.max_images,
                     oracle_mode=args.oracle)
    for k in rep.METRICS:
        print(f"{k:>5}: {rep.mean[k]:.6g} +- {rep.std[k]:.3g}")
    outs = [os.path.join(args.out_dir, n) for n in
            ("report.json", "per_sample.csv", "scatter_density.csv")]
    config = {k: getattr(args, k) for k in
              ("ckpt", "data", "split", "max_images", "mre_mode", "oracle")}
    config["target"] = target
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), "eval", config, {},
                    [args.ckpt, args.data], outs, t0, threads)
    return EXIT_OK


def _cmd_predict(args, threads) -> int:
    import numpy as np

    from . import evaluation as E
    t0 = time.time()
    ds, model = _load_for_eval(args)
    if not (0 <= args.sample_index < len(ds.samples)):
        raise ValueError(f"--sample-index {args.sample_index} outside [0, {len(ds.samples)})")
    target = args.target or model.config.target
    sample = ds.samples[args.sample_index]
    ref = np.asarray(getattr(sample, target), dtype=np.float64)
    pred = E.predict_sample(model, sample, ds.grid, target)
    os.makedirs(args.out_dir, exist_ok=True)
    panel = os.path.join(args.out_dir, f"sample{args.sample_index:04d}.ppm")
    E.write_heatmap_panels(ref, pred, panel)
    csv_path = os.path.join(args.out_dir, "per_step_metrics.csv")
    with open(csv_path, "w") as f:
        f.write("step,day,r2,rmse,mre\n")
        thr = E.AOIConfig().threshold(target)
        for s, day in enumerate(ds.grid.report_days):
            f.write(f"{s},{day},{E.r2(ref[s], pred[s])!r},"
                    f"{E.rmse(ref[s], pred[s])!r},{E.mre_aoi(ref[s], pred[s], thr)!r}\n")
    print(f"wrote {panel} and {csv_path}")
    config = {"ckpt": args.ckpt, "data": args.data, "sample_index": args.sample_index,
              "target": target}
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), "predict", config, {},
                    [args.ckpt, args.data], [panel, csv_path], t0, threads)
    return EXIT_OK


def _cmd_bench(args, threads) -> int:
    import numpy as np

    from . import evaluation as E
    t0 = time.time()
    ds, model = _load_for_eval(args)
    if args.repeats < 1:
        raise ValueError("--repeats must be >= 1")
    per_repeat = []
    for _ in range(args.repeats):
        t1 = time.time()
        for s in ds.samples:
            E.predict_sample(model, s, ds.grid, model.config.target)
        per_repeat.append((time.time() - t1) / len(ds.samples))
    mean = float(np.mean(per_repeat))
    std = float(np.std(per_repeat)) if args.repeats > 1 else 0.0
    print(f"inference: {mean:.4f} +- {std:.4f} s/sample "
          f"({args.repeats} repeats, {len(ds.samples)} samples)")
    _write_manifest(str(args.ckpt) + ".bench.manifest.json", "bench",
                    {"ckpt": args.ckpt, "data": args.data, "repeats": args.repeats},
                    {}, [args.ckpt, args.data], [], t0, threads)
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "fit-relperm": _cmd_fit_relperm,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # threads must hit the environment before numpy is imported anywhere
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--threads", type=int, default=0)
    known, _ = probe.parse_known_args(argv)
    _apply_threads(known.threads)

    parser = build_parser()
    try:
        _load_config_defaults(parser, argv)
        args = parser.parse_args(argv)
    except (OSError, json.JSONDecodeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    from . import tensor as T
    T.set_fft_workers(_fft_workers(args.threads))

    from .datagen import DataFormatError, FitError
    from .training import NonFiniteError, TrainingDiverged
    try:
        return _COMMANDS[args.command](args, args.threads)
    except (ValueError, FitError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as e:
        print(f"data format error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
