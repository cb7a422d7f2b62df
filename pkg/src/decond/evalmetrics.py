"""Scores of predicted means against withheld truth."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, GridTooSmall, ZeroVariance

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SCORE_COLUMNS = ("model", "seed", "rmse", "mae", "pearson", "ssim", "n_points")


def _pair(pred, truth, minimum: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.shape != t.shape:
        raise DimensionMismatch(f"{p.size} predictions for {t.size} truth values")
    if p.size < minimum:
        raise DimensionMismatch(f"need at least {minimum} values, got {p.size}")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth, 1)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth, 1)
    return float(np.mean(np.abs(p - t)))


def pearson(pred, truth) -> float:
    p, t = _pair(pred, truth, 2)
    sp, st = np.std(p, ddof=1), np.std(t, ddof=1)
    if sp == 0 or st == 0:
        raise ZeroVariance("pearson correlation is undefined for a constant series")
    r = np.sum((p - p.mean()) * (t - t.mean())) / ((p.size - 1) * sp * st)
    return float(np.clip(r, -1.0, 1.0))


def ssim(pred_grid, truth_grid) -> float:
    """Mean SSIM over non-overlapping 8x8 windows.

    ``C1 = (0.01 R)^2`` and ``C2 = (0.03 R)^2`` with ``R`` the range of the
    truth grid. Incomplete border windows are skipped.
    """
    x = np.asarray(pred_grid, dtype=float)
    y = np.asarray(truth_grid, dtype=float)
    if x.shape != y.shape or x.ndim != 2:
        raise DimensionMismatch(f"grids must be 2-D with equal shapes, got {x.shape} and {y.shape}")
    H, W = x.shape
    w = SSIM_WINDOW
    if H < w or W < w:
        raise GridTooSmall(f"grid {H}x{W} is smaller than the {w}x{w} window")
    R = float(y.max() - y.min())
    c1, c2 = (SSIM_K1 * R) ** 2, (SSIM_K2 * R) ** 2
    h, v = H // w, W // w
    xb = x[: h * w, : v * w].reshape(h, w, v, w).transpose(0, 2, 1, 3).reshape(h, v, -1)
    yb = y[: h * w, : v * w].reshape(h, w, v, w).transpose(0, 2, 1, 3).reshape(h, v, -1)
    mx, my = xb.mean(-1), yb.mean(-1)
    vx, vy = xb.var(-1), yb.var(-1)
    cxy = ((xb - mx[..., None]) * (yb - my[..., None])).mean(-1)
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx**2 + my**2 + c1) * (vx + vy + c2)
    if np.any(den == 0):
        # constant truth and prediction windows: identical windows score 1
        s = np.where(den == 0, 1.0, num / np.where(den == 0, 1.0, den))
    else:
        s = num / den
    return float(np.mean(s))


@dataclass(frozen=True)
class ScoreReport:
    model: str
    seed: int
    rmse: float
    mae: float
    pearson: float
    ssim: float | None
    n_points: int
    ssim_window: int = SSIM_WINDOW
    ssim_range: str = "truth min-max"


def score(pred, truth, model: str = "", seed: int = 0, grid_shape=None) -> ScoreReport:
    """All metrics; SSIM only when ``grid_shape`` is given."""
    p, t = _pair(pred, truth, 1)
    try:
        r = pearson(p, t)
    except (ZeroVariance, DimensionMismatch):
        r = math.nan
    s = ssim(p.reshape(grid_shape), t.reshape(grid_shape)) if grid_shape is not None else None
    return ScoreReport(model, int(seed), rmse(p, t), mae(p, t), r, s, int(p.size))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_scores_csv(path, reports, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, quoting=csv.QUOTE_NONE, lineterminator="\n", escapechar="\\")
        if new:
            wr.writerow(SCORE_COLUMNS)
        for rep in reports:
            d = asdict(rep) if isinstance(rep, ScoreReport) else dict(rep)
            wr.writerow([_fmt(d.get(c)) for c in SCORE_COLUMNS])


def read_scores_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        d = {"model": r["model"], "seed": int(r["seed"]) if r["seed"] else None}
        for c in ("rmse", "mae", "pearson", "ssim"):
            d[c] = float(r[c]) if r.get(c) not in (None, "") else None
        d["n_points"] = int(r["n_points"]) if r.get("n_points") else None
        out.append(d)
    return out
