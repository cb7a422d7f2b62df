"""Benchmark protocols and the shrinkage-operator ablation.

Protocols
---------
swissroll-direct
    Height-bagged swiss roll, every bag paired with its own noisy mean.
swissroll-indirect
    The same data split so that half the bags keep their points and the
    other half keep only their (covariate, target) pairs.
grid
    Synthetic gridded scene downscaled from LR targets with a mediator.

Every (model, seed) cell yields exactly one row; failures are recorded with
``status`` set to the error type.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import substream
from .datasets import bag_by_height, make_grid_scene, make_swiss_roll, split_indirect
from .embeddings import REPLICATED, SHRINKAGE, build_cmo, cme_grid
from .errors import DecondError
from .evalmetrics import score
from .kernels import GAUSSIAN, KernelSpec, median_heuristic
from .models import ModelSettings, fit_model

log = logging.getLogger(__name__)

PROTOCOLS = ("swissroll-direct", "swissroll-indirect", "grid")
SWISSROLL_MODELS = ("cmp", "s-cmp", "varcmp", "bagg-gp", "vbagg", "gpr")
GRID_MODELS = ("varcmp", "vbagg", "vargpr")
UPSAMPLED = "upsampled-lr"


@dataclass
class ProtocolSizes:
    n_points: int = 3000
    n_bags: int = 50
    noise_frac: float = 0.05
    grid_hr: tuple[int, int] = (60, 120)
    grid_lr: tuple[int, int] = (6, 12)
    grid_dx: int = 4
    grid_noise_sd: float = 0.1


# Desk-scale training settings per protocol
def default_settings(protocol: str) -> dict:
    base = dict(steps=60, variational_steps=400, learning_rate=0.05, n_inducing=64,
                points_per_bag=0, lam=1e-3, agg_noise_sd=0.1)
    if protocol == "grid":
        # variational fits train on a fixed 25-point subsample of each 100-pixel bag
        base.update(
            hr_noise_sd=0.1,
            points_per_bag=25,
            variational_baselines="true",
            k_sections={
                "k.0": {"family": "matern32", "features": "0,1", "lengthscales": "auto"},
                "k.1": {"family": "gaussian", "features": "2,3", "lengthscales": "auto"},
            },
            l_sections={
                "l.0": {"family": "matern32", "features": "0,1", "lengthscales": "auto"},
                "l.1": {"family": "gaussian", "features": "2", "lengthscales": "auto"},
            },
        )
    return base


@dataclass
class Cell:
    protocol: str
    seed: int
    model: str
    rmse: float = math.nan
    mae: float = math.nan
    pearson: float = math.nan
    ssim: float | None = None
    n_points: int = 0
    seconds: float = 0.0
    status: str = "ok"


def swissroll_data(seed: int, sizes: ProtocolSizes, indirect: bool):
    pts, t = make_swiss_roll(sizes.n_points, substream(seed, "data"))
    hb = bag_by_height(pts, t, sizes.n_bags, sizes.noise_frac * float(np.std(t)), substream(seed, "noise"))
    X_all, truth = hb.bags.points, hb.point_targets
    if not indirect:
        return hb.bags, hb.aggregates, X_all, truth, None
    sp = split_indirect(hb.bags, hb.aggregates, substream(seed, "split"))
    return sp.d1, sp.d2, X_all, truth, None


def grid_data(seed: int, sizes: ProtocolSizes):
    H, W = sizes.grid_hr
    h, w = sizes.grid_lr
    sc = make_grid_scene(H, W, h, w, sizes.grid_dx, sizes.grid_noise_sd, substream(seed, "data"))
    return sc.d1, sc.d2, sc.hr_inputs(), sc.hr_truth.ravel(), sc


def run_seed(protocol: str, seed: int, models: Sequence[str] | None = None,
             sizes: ProtocolSizes | None = None, overrides: dict | None = None) -> list[Cell]:
    """All model cells of one protocol for one seed."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    sizes = sizes or ProtocolSizes()
    if protocol == "grid":
        d1, d2, X, truth, scene = grid_data(seed, sizes)
        names = models or GRID_MODELS
        shape = scene.hr_shape
    else:
        d1, d2, X, truth, scene = swissroll_data(seed, sizes, protocol == "swissroll-indirect")
        names = models or SWISSROLL_MODELS
        shape = None
    kw = default_settings(protocol)
    kw.update(overrides or {})
    cells = []
    for name in names:
        t0 = time.perf_counter()
        cell = Cell(protocol, seed, name)
        try:
            fm = fit_model(d1, d2, ModelSettings(name=name, seed=seed, **kw))
            mean, _ = fm.predict(X)
            rep = score(mean, truth, name, seed, shape)
            cell.rmse, cell.mae, cell.pearson, cell.ssim, cell.n_points = (
                rep.rmse, rep.mae, rep.pearson, rep.ssim, rep.n_points)
        except (DecondError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.warning("%s seed %d model %s failed: %s", protocol, seed, name, exc)
            cell.status = type(exc).__name__
        cell.seconds = time.perf_counter() - t0
        cells.append(cell)
    if scene is not None:
        rep = score(scene.upsampled_lr().ravel(), truth, UPSAMPLED, seed, shape)
        cells.append(Cell(protocol, seed, UPSAMPLED, rep.rmse, rep.mae, rep.pearson, rep.ssim, rep.n_points))
    return cells


def workers() -> int:
    env = os.environ.get("DECOND_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer DECOND_THREADS=%r", env)
    return os.cpu_count() or 1


def run_benchmark(protocol: str, seeds: Iterable[int], models: Sequence[str] | None = None,
                  sizes: ProtocolSizes | None = None, overrides: dict | None = None,
                  on_cells: Callable[[list[Cell]], None] | None = None) -> list[Cell]:
    """Run every seed, in worker processes when more than one worker is allowed."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    out: list[Cell] = []
    n = min(workers(), len(seeds))
    if n <= 1:
        for s in seeds:
            cells = run_seed(protocol, s, models, sizes, overrides)
            out.extend(cells)
            if on_cells:
                on_cells(cells)
        return out
    with ProcessPoolExecutor(max_workers=n) as ex:
        futs = [ex.submit(run_seed, protocol, s, models, sizes, overrides) for s in seeds]
        for f in futs:
            cells = f.result()
            out.extend(cells)
            if on_cells:
                on_cells(cells)
    return out


def summarize(cells: Sequence[Cell]) -> list[dict]:
    """Mean and sample standard deviation of each metric per model."""
    names = list(dict.fromkeys(c.model for c in cells))
    rows = []
    for name in names:
        ok = [c for c in cells if c.model == name and c.status == "ok"]
        row = {"model": name, "n_ok": len(ok), "n_failed": sum(1 for c in cells if c.model == name) - len(ok)}
        for key in ("rmse", "mae", "pearson", "ssim"):
            vals = np.array([getattr(c, key) for c in ok if getattr(c, key) is not None], dtype=float)
            row[f"{key}_mean"] = float(np.mean(vals)) if vals.size else math.nan
            row[f"{key}_sd"] = float(np.std(vals, ddof=1)) if vals.size > 1 else math.nan
        rows.append(row)
    return rows


# ------------------------------------------------------------- ablation
ABLATION_LAMBDA = 0.1
ABLATION_GRID = 50
# build the replicated Gram in single precision above this many bytes
FLOAT64_LIMIT = 1.0e9


def ablation_data(n_bags: int, n_per_bag: int, seed: int):
    """``y ~ N(0, 2)`` per bag, ``x | y ~ N(y sin y, 0.5^2)`` per point."""
    from .datasets import BagDataset

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, math.sqrt(2.0), n_bags)
    x = y[:, None] * np.sin(y[:, None]) + 0.5 * rng.standard_normal((n_bags, n_per_bag))
    return BagDataset(x.reshape(-1, 1), np.full(n_bags, n_per_bag), y[:, None])


@dataclass
class AblationRow:
    mode: str
    rmse_between_modes: float
    wall_clock: float
    n_bags: int
    n_per_bag: int
    precision: str


def ablate_shrinkage(n_bags: int, n_per_bag: int, seed: int = 0,
                     grid: int = ABLATION_GRID) -> list[AblationRow]:
    """Compare replicated and shrinkage conditional mean embeddings on a grid."""
    if n_bags < 1 or n_per_bag < 1:
        raise ValueError("sizes must be >= 1")
    bags = ablation_data(n_bags, n_per_bag, seed)
    lx = median_heuristic(bags.points, seed=seed) if bags.total_points > 1 else 1.0
    ly = median_heuristic(bags.covariates, seed=seed) if n_bags > 1 else 1.0
    k = KernelSpec.single(GAUSSIAN, [0], [lx])
    l = KernelSpec.single(GAUSSIAN, [0], [ly])
    xg = np.linspace(bags.points.min(), bags.points.max(), grid)
    yg = np.linspace(bags.covariates.min(), bags.covariates.max(), grid)

    t0 = time.perf_counter()
    cs = build_cmo(bags, k, l, ABLATION_LAMBDA, SHRINKAGE, with_bag_gram=False)
    mu_s = cme_grid(cs, yg, xg)
    t_s = time.perf_counter() - t0
    del cs

    n = bags.total_points
    dtype = np.float64 if 8.0 * n * n <= FLOAT64_LIMIT else np.float32
    t0 = time.perf_counter()
    cr = build_cmo(bags, k, l, ABLATION_LAMBDA, REPLICATED, dtype=dtype)
    mu_r = cme_grid(cr, yg, xg)
    t_r = time.perf_counter() - t0
    del cr

    err = float(np.sqrt(np.mean((mu_r - mu_s) ** 2)))
    prec = np.dtype(dtype).name
    return [
        AblationRow(REPLICATED, err, t_r, n_bags, n_per_bag, prec),
        AblationRow(SHRINKAGE, err, t_s, n_bags, n_per_bag, "float64"),
    ]
