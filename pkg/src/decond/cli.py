"""Command-line interface.

Subcommands
-----------
gen swissroll | gen grid
    Write synthetic datasets as CSV together with ``manifest.json``.
fit
    Fit a model described by an INI run configuration (variational fits
    also write their training curve to ``<model>_curve.csv``).
predict
    Posterior mean and variance of a saved model at query locations.
eval
    Score a predictions CSV against a truth CSV.
benchmark
    Run every model of a protocol over several seeds.
ablate
    Compare the replicated and shrinkage conditional mean embeddings.

Exit codes are 0 on success, 2 on bad arguments or configuration, 3 on
input/output failures and 4 on model or data errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import (
    PROTOCOLS,
    ProtocolSizes,
    ablate_shrinkage,
    run_benchmark,
    summarize,
)
from .config import RunConfig, substream
from .datasets import (
    bag_by_height,
    ensure_dir,
    make_grid_scene,
    make_swiss_roll,
    read_aggregates_csv,
    read_bags_csv,
    read_inputs_csv,
    read_predictions_csv,
    read_truth_csv,
    split_indirect,
    write_aggregates_csv,
    write_bags_csv,
    write_predictions_csv,
    write_truth_csv,
)
from .errors import ConfigError, DecondError, DimensionMismatch, EmptyDataset, ParseError, SchemaError
from .evalmetrics import score, write_scores_csv
from .models import ModelSettings, fit_model, load_model, save_model
from .variational import write_curve_csv

log = logging.getLogger("decond")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MODEL = 0, 2, 3, 4
BENCH_COLUMNS = ("protocol", "seed", "model", "rmse", "mae", "pearson", "ssim", "n_points",
                 "seconds", "status")
SUMMARY_COLUMNS = ("model", "n_ok", "n_failed", "rmse_mean", "rmse_sd", "mae_mean", "mae_sd",
                   "pearson_mean", "pearson_sd", "ssim_mean", "ssim_sd")


class UsageError(Exception):
    pass


def _shape(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}") from None
    if a < 1 or b < 1:
        raise argparse.ArgumentTypeError(f"grid sides must be positive, got {text!r}")
    return a, b


def _write_manifest(out: Path, kind: str, seed: int, params: dict, files: list[str]) -> None:
    manifest = {"generator": kind, "generator_version": __version__, "seed": seed,
                "parameters": params, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


# ------------------------------------------------------------------ gen
def cmd_gen_swissroll(args) -> int:
    if args.n < 1 or args.bags < 2:
        raise UsageError("need --n >= 1 and --bags >= 2")
    if args.noise_frac < 0:
        raise UsageError("--noise-frac must be nonnegative")
    out = ensure_dir(args.out)
    pts, t = make_swiss_roll(args.n, substream(args.seed, "data"))
    hb = bag_by_height(pts, t, args.bags, args.noise_frac * float(np.std(t)), substream(args.seed, "noise"))
    write_bags_csv(out / "bags.csv", hb.bags)
    write_aggregates_csv(out / "aggregates.csv", hb.aggregates)
    write_truth_csv(out / "truth.csv", hb.bags.points, hb.point_targets)
    files = ["bags.csv", "aggregates.csv", "truth.csv"]
    params = {"n": args.n, "bags": args.bags, "noise_frac": args.noise_frac, "indirect": args.indirect}
    if args.indirect:
        sp = split_indirect(hb.bags, hb.aggregates, substream(args.seed, "split"))
        write_bags_csv(out / "d1_bags.csv", sp.d1)
        write_aggregates_csv(out / "d2_aggregates.csv", sp.d2)
        files += ["d1_bags.csv", "d2_aggregates.csv"]
        params["d1_bags"] = [int(i) for i in sp.d1_index]
        params["d2_bags"] = [int(i) for i in sp.d2_index]
    _write_manifest(out, "swissroll", args.seed, params, files)
    return EXIT_OK


def cmd_gen_grid(args) -> int:
    (H, W), (h, w) = args.hr, args.lr
    if H % h or W % w:
        raise UsageError(f"HR grid {H}x{W} is not a multiple of the LR grid {h}x{w}")
    if h * w < 2:
        raise UsageError("the LR grid needs at least two pixels to split into bags and targets")
    if args.dx < 1 or args.noise < 0:
        raise UsageError("need --dx >= 1 and --noise >= 0")
    out = ensure_dir(args.out)
    sc = make_grid_scene(H, W, h, w, args.dx, args.noise, substream(args.seed, "data"))
    X = sc.hr_inputs()
    write_bags_csv(out / "bags.csv", sc.d1)
    write_aggregates_csv(out / "aggregates.csv", sc.d2)
    write_truth_csv(out / "truth.csv", X, sc.hr_truth.ravel())
    write_predictions_csv(out / "upsampled.csv", X, sc.upsampled_lr().ravel(), np.zeros(X.shape[0]))
    params = {"hr": [H, W], "lr": [h, w], "dx": args.dx, "noise": args.noise}
    _write_manifest(out, "grid", args.seed, params,
                    ["bags.csv", "aggregates.csv", "truth.csv", "upsampled.csv"])
    return EXIT_OK


# ------------------------------------------------------ fit / predict / eval
def cmd_fit(args) -> int:
    cfg = RunConfig.load(args.config)
    overrides = {"seed": args.seed} if args.seed is not None else {}
    settings = ModelSettings.from_config(cfg, **overrides)
    bags_path, agg_path = cfg.path("data", "bags"), cfg.path("data", "aggregates")
    d1, d2 = read_bags_csv(bags_path), read_aggregates_csv(agg_path)
    fm = fit_model(d1, d2, settings)
    out = Path(args.out)
    save_model(out, fm, {"bags": str(bags_path.resolve()), "aggregates": str(agg_path.resolve())})
    log.info("fitted %s, wrote %s", fm.name, out)
    if fm.kind == "variational" and fm.payload.curve:
        # noise levels in the curve are on the standardized target scale
        write_curve_csv(out.with_name(out.stem + "_curve.csv"), fm.payload.curve)
    return EXIT_OK


def cmd_predict(args) -> int:
    fm = load_model(args.model)
    X = read_inputs_csv(args.inputs)
    mean, var = fm.predict(X)
    write_predictions_csv(args.out, X, mean, var)
    return EXIT_OK


def cmd_eval(args) -> int:
    Xp, mean, _ = read_predictions_csv(args.predictions)
    Xt, truth = read_truth_csv(args.truth)
    if Xp.shape != Xt.shape or not np.allclose(Xp, Xt, rtol=0.0, atol=1e-9):
        raise DimensionMismatch("prediction and truth locations differ")
    rep = score(mean, truth, args.model, args.seed, args.grid)
    write_scores_csv(args.out, [rep], append=args.append)
    return EXIT_OK


# ------------------------------------------------------------ benchmark
def _cell_row(c) -> list[str]:
    d = asdict(c)
    out = []
    for k in BENCH_COLUMNS:
        v = d[k]
        out.append("" if v is None else format(v, ".17g") if isinstance(v, float) else str(v))
    return out


def cmd_benchmark(args) -> int:
    if args.seeds < 1:
        raise UsageError("need at least one seed")
    out = ensure_dir(args.out)
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.variational_steps is not None:
        overrides["variational_steps"] = args.variational_steps
    models = args.models.split(",") if args.models else None
    sizes = ProtocolSizes()
    if args.n is not None:
        sizes.n_points = args.n
    if args.bags is not None:
        sizes.n_bags = args.bags
    path = out / "scores.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(BENCH_COLUMNS)

        def append(cells):
            for c in cells:
                wr.writerow(_cell_row(c))
            fh.flush()

        cells = run_benchmark(args.protocol, range(args.first_seed, args.first_seed + args.seeds),
                              models, sizes, overrides, on_cells=append)
    rows = summarize(cells)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SUMMARY_COLUMNS)
        for r in rows:
            wr.writerow([r[k] if isinstance(r[k], (int, str)) else format(r[k], ".17g")
                         for k in SUMMARY_COLUMNS])
    for r in rows:
        print(f"{r['model']:>14s}  rmse {r['rmse_mean']:.4f} +- {r['rmse_sd']:.4f}"
              f"  ok {r['n_ok']}  failed {r['n_failed']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.bags < 1 or args.per_bag < 1:
        raise UsageError("--bags and --per-bag must be >= 1")
    rows = ablate_shrinkage(args.bags, args.per_bag, args.seed)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["mode", "rmse_between_modes", "wall_clock", "n_bags", "n_per_bag", "precision"])
        for r in rows:
            wr.writerow([r.mode, format(r.rmse_between_modes, ".17g"), format(r.wall_clock, ".17g"),
                         r.n_bags, r.n_per_bag, r.precision])
    rep, shr = rows
    print(f"rmse between modes {rep.rmse_between_modes:.3g}, "
          f"speedup {rep.wall_clock / max(shr.wall_clock, 1e-12):.1f}x")
    return EXIT_OK


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decond", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic datasets")
    gs = g.add_subparsers(dest="generator", required=True)
    sr = gs.add_parser("swissroll", help="height-bagged swiss roll")
    sr.add_argument("--n", type=int, default=3000, help="number of points")
    sr.add_argument("--bags", type=int, default=50, help="number of height bags")
    sr.add_argument("--noise-frac", type=float, default=0.05,
                    help="aggregate noise sd as a fraction of the target sd")
    sr.add_argument("--indirect", action="store_true",
                    help="also write a split into disjoint bag and target halves")
    sr.add_argument("--seed", type=int, default=0)
    sr.add_argument("--out", required=True, help="output directory")
    sr.set_defaults(func=cmd_gen_swissroll)
    gr = gs.add_parser("grid", help="gridded downscaling scene")
    gr.add_argument("--hr", type=_shape, default=(60, 120), help="HR grid as ROWSxCOLS")
    gr.add_argument("--lr", type=_shape, default=(6, 12), help="LR grid as ROWSxCOLS")
    gr.add_argument("--dx", type=int, default=4, help="number of HR covariate channels")
    gr.add_argument("--noise", type=float, default=0.1, help="LR target noise sd")
    gr.add_argument("--seed", type=int, default=0)
    gr.add_argument("--out", required=True, help="output directory")
    gr.set_defaults(func=cmd_gen_grid)

    f = sub.add_parser("fit", help="fit a model from a run configuration")
    f.add_argument("config", help="INI run configuration")
    f.add_argument("--out", default="model.ini", help="fitted model file")
    f.add_argument("--seed", type=int, default=None, help="override [train] seed")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="predict with a fitted model")
    pr.add_argument("model", help="fitted model file")
    pr.add_argument("inputs", help="CSV with x_* columns")
    pr.add_argument("--out", default="predictions.csv")
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="score predictions against truth")
    ev.add_argument("predictions")
    ev.add_argument("truth")
    ev.add_argument("--out", default="scores.csv")
    ev.add_argument("--model", default="", help="model label for the score row")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--grid", type=_shape, default=None, help="HR grid ROWSxCOLS; enables SSIM")
    ev.add_argument("--append", action="store_true", help="append to an existing score file")
    ev.set_defaults(func=cmd_eval)

    b = sub.add_parser("benchmark", help="run a benchmark protocol")
    b.add_argument("protocol", choices=PROTOCOLS)
    b.add_argument("--seeds", type=int, default=10, help="number of seeds")
    b.add_argument("--first-seed", type=int, default=0)
    b.add_argument("--models", default=None, help="comma-separated subset of models")
    b.add_argument("--n", type=int, default=None, help="swiss-roll points")
    b.add_argument("--bags", type=int, default=None, help="swiss-roll bags")
    b.add_argument("--steps", type=int, default=None, help="exact-model Adam steps")
    b.add_argument("--variational-steps", type=int, default=None)
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_benchmark)

    a = sub.add_parser("ablate", help="replicated vs shrinkage embedding ablation")
    a.add_argument("--bags", type=int, required=True)
    a.add_argument("--per-bag", type=int, required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default="ablation.csv")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        if isinstance(exc.__cause__, OSError):
            print(f"decond: io error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"decond: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError, SchemaError, EmptyDataset) as exc:
        print(f"decond: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DecondError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"decond: model error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
