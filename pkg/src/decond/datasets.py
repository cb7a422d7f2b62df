"""Bag datasets, synthetic generators and CSV ingestion/emission.

Two containers carry all training data:

* :class:`BagDataset` holds bags of high-resolution points together with one
  low-resolution covariate per bag.
* :class:`AggregateDataset` holds low-resolution covariates paired with
  aggregate targets.

The two need not refer to the same bags; when they do (direct matching) the
rows of the aggregate set follow the bag order.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    AllBagsEmpty,
    DimensionMismatch,
    EmptyDataset,
    ParseError,
    SchemaError,
    TooFewBags,
)

log = logging.getLogger(__name__)

SWISS_ROLL_HEIGHT = 21.0
HEIGHT_COLUMN = 1
FLOAT_FORMAT = ".17g"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# ------------------------------------------------------------ containers
@dataclass(frozen=True, eq=False)
class BagDataset:
    """Bags of points stored contiguously, one covariate row per bag.

    Parameters
    ----------
    points : (N_tot, d_x) array
        All points, grouped so that bag ``j`` occupies
        ``points[offsets[j]:offsets[j + 1]]``.
    sizes : (N,) int array
        Bag sizes, all positive.
    covariates : (N, d_y) array
        Bag-level covariates.
    bag_ids : (N,) int array, optional
        External identifiers (defaults to ``0..N-1``).
    """

    points: np.ndarray
    sizes: np.ndarray
    covariates: np.ndarray
    bag_ids: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        sizes = np.asarray(self.sizes, dtype=np.int64).ravel()
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        if sizes.size == 0:
            raise EmptyDataset("a bag dataset needs at least one bag")
        if np.any(sizes < 1):
            raise DimensionMismatch("every bag must be nonempty")
        if int(sizes.sum()) != pts.shape[0]:
            raise DimensionMismatch(
                f"bag sizes sum to {int(sizes.sum())} but {pts.shape[0]} points were given"
            )
        if cov.shape[0] != sizes.size:
            raise DimensionMismatch(f"{cov.shape[0]} covariate rows for {sizes.size} bags")
        ids = np.arange(sizes.size) if self.bag_ids is None else np.asarray(self.bag_ids, dtype=np.int64)
        if ids.shape != sizes.shape:
            raise DimensionMismatch("bag_ids must have one entry per bag")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "sizes", _frozen(sizes))
        object.__setattr__(self, "covariates", _frozen(cov))
        object.__setattr__(self, "bag_ids", _frozen(ids))

    @classmethod
    def from_bags(cls, bags: Sequence[tuple[np.ndarray, np.ndarray]], bag_ids=None) -> "BagDataset":
        if len(bags) == 0:
            raise EmptyDataset("a bag dataset needs at least one bag")
        # 1-D point arrays are read as n points of one feature
        pts = [np.asarray(p, dtype=float) for p, _ in bags]
        pts = [p[:, None] if p.ndim == 1 else p for p in pts]
        cov = np.array([np.atleast_1d(np.asarray(y, dtype=float)) for _, y in bags])
        return cls(np.vstack(pts), [p.shape[0] for p in pts], cov, bag_ids)

    @property
    def n_bags(self) -> int:
        return int(self.sizes.size)

    @property
    def total_points(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim_x(self) -> int:
        return int(self.points.shape[1])

    @property
    def dim_y(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def bag_index(self) -> np.ndarray:
        """Bag position (0..N-1) of every point."""
        return np.repeat(np.arange(self.n_bags), self.sizes)

    @property
    def replicated_covariates(self) -> np.ndarray:
        """Bag covariates repeated once per point."""
        return np.repeat(self.covariates, self.sizes, axis=0)

    @property
    def bags(self) -> list[tuple[np.ndarray, np.ndarray]]:
        off = self.offsets
        return [(self.points[off[j] : off[j + 1]], self.covariates[j]) for j in range(self.n_bags)]

    def centroids(self) -> np.ndarray:
        return bag_means(self.points, self.sizes)

    def subset(self, index: Sequence[int]) -> "BagDataset":
        """Bags at positions ``index`` (in that order)."""
        index = np.asarray(index, dtype=np.int64)
        off = self.offsets
        rows = np.concatenate([np.arange(off[j], off[j + 1]) for j in index]) if index.size else []
        return BagDataset(self.points[rows], self.sizes[index], self.covariates[index], self.bag_ids[index])

    def subsample(self, max_per_bag: int, seed: int) -> "BagDataset":
        """Keep at most ``max_per_bag`` randomly chosen points in each bag."""
        if max_per_bag < 1:
            raise ValueError("max_per_bag must be >= 1")
        if int(self.sizes.max()) <= max_per_bag:
            return self
        rng = np.random.default_rng(seed)
        off = self.offsets
        rows, sizes = [], []
        for j in range(self.n_bags):
            n = int(self.sizes[j])
            pick = np.arange(n) if n <= max_per_bag else np.sort(rng.choice(n, max_per_bag, replace=False))
            rows.append(off[j] + pick)
            sizes.append(pick.size)
        return BagDataset(self.points[np.concatenate(rows)], sizes, self.covariates, self.bag_ids)

    def with_covariates(self, covariates: np.ndarray) -> "BagDataset":
        return BagDataset(self.points, self.sizes, covariates, self.bag_ids)

    def with_points(self, points: np.ndarray) -> "BagDataset":
        return BagDataset(points, self.sizes, self.covariates, self.bag_ids)


@dataclass(frozen=True, eq=False)
class AggregateDataset:
    """Covariates ``(M, d_y)`` paired with aggregate targets ``(M,)``."""

    covariates: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        z = np.asarray(self.targets, dtype=float).ravel()
        if cov.shape[0] != z.shape[0]:
            raise DimensionMismatch(f"{cov.shape[0]} covariate rows for {z.shape[0]} targets")
        if not np.all(np.isfinite(z)):
            raise ValueError("aggregate targets must be finite")
        object.__setattr__(self, "covariates", _frozen(cov))
        object.__setattr__(self, "targets", _frozen(z))

    @property
    def size(self) -> int:
        return int(self.targets.shape[0])

    @property
    def dim_y(self) -> int:
        return int(self.covariates.shape[1])

    def subset(self, index: Sequence[int]) -> "AggregateDataset":
        index = np.asarray(index, dtype=np.int64)
        return AggregateDataset(self.covariates[index], self.targets[index])

    def with_targets(self, targets) -> "AggregateDataset":
        return AggregateDataset(self.covariates, targets)

    def append(self, other: "AggregateDataset") -> "AggregateDataset":
        return AggregateDataset(
            np.vstack([self.covariates, other.covariates]),
            np.concatenate([self.targets, other.targets]),
        )


def empty_aggregates(dim_y: int) -> AggregateDataset:
    return AggregateDataset(np.zeros((0, dim_y)), np.zeros(0))


def bag_means(values: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Per-bag means of contiguous rows (works for 1-D and 2-D ``values``)."""
    values = np.asarray(values, dtype=float)
    sizes = np.asarray(sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    sums = np.add.reduceat(values, starts, axis=0)
    return sums / (sizes if values.ndim == 1 else sizes[:, None])


# ------------------------------------------------------------ swiss roll
def swiss_roll_from_uniforms(u: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map ``u`` in [0, 1] and heights ``h`` to swiss-roll points and positions."""
    t = 1.5 * np.pi * (1.0 + 2.0 * np.asarray(u, dtype=float))
    h = np.asarray(h, dtype=float)
    return np.column_stack([t * np.cos(t), h, t * np.sin(t)]), t


def make_swiss_roll(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``n`` swiss-roll points ``(t cos t, h, t sin t)`` with targets ``t``.

    Heights are uniform on ``[0, 21]``; column 1 is the height.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=n)
    h = SWISS_ROLL_HEIGHT * rng.uniform(size=n)
    return swiss_roll_from_uniforms(u, h)


class HeightBags(NamedTuple):
    bags: BagDataset
    aggregates: AggregateDataset
    point_targets: np.ndarray  # clean per-point targets, in bag order


def bag_by_height(
    points: np.ndarray,
    targets: np.ndarray,
    n_bags: int,
    noise_sd: float,
    seed: int,
    height_column: int = HEIGHT_COLUMN,
) -> HeightBags:
    """Group points into ``n_bags`` equal height intervals.

    The bag covariate is the interval centre; the aggregate target is the bag
    mean of ``targets`` plus Gaussian noise of standard deviation ``noise_sd``.
    Empty intervals are dropped with a warning.
    """
    points = np.asarray(points, dtype=float)
    targets = np.asarray(targets, dtype=float).ravel()
    if n_bags < 2:
        raise TooFewBags("need at least two height intervals")
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    if points.shape[0] == 0:
        raise AllBagsEmpty("no points to bag")
    heights = points[:, height_column]
    lo, hi = float(heights.min()), float(heights.max())
    if not hi > lo:
        raise AllBagsEmpty("height range is degenerate")
    edges = np.linspace(lo, hi, n_bags + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    which = np.clip(((heights - lo) / (hi - lo) * n_bags).astype(np.int64), 0, n_bags - 1)
    counts = np.bincount(which, minlength=n_bags)
    kept = np.flatnonzero(counts)
    if kept.size == 0:
        raise AllBagsEmpty("every height interval is empty")
    if kept.size < n_bags:
        log.warning("dropped %d empty height intervals out of %d", n_bags - kept.size, n_bags)
    order = np.argsort(which, kind="stable")
    sizes = counts[kept]
    bags = BagDataset(points[order], sizes, centres[kept][:, None])
    clean = targets[order]
    rng = np.random.default_rng(seed)
    z = bag_means(clean, sizes) + noise_sd * rng.standard_normal(kept.size)
    return HeightBags(bags, AggregateDataset(bags.covariates, z), clean)


class IndirectSplit(NamedTuple):
    d1: BagDataset
    d2: AggregateDataset
    d1_index: np.ndarray
    d2_index: np.ndarray


def split_indirect(bags: BagDataset, aggregates: AggregateDataset, seed: int) -> IndirectSplit:
    """Keep the bags of a random ``floor(B/2)`` subset and the targets of the rest."""
    B = bags.n_bags
    if aggregates.size != B:
        raise DimensionMismatch(f"{B} bags but {aggregates.size} aggregate rows")
    if B < 2:
        raise TooFewBags("indirect splitting needs at least two bags")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(B)
    n1 = B // 2
    d1_index = np.sort(perm[:n1])
    d2_index = np.sort(perm[n1:])
    return IndirectSplit(bags.subset(d1_index), aggregates.subset(d2_index), d1_index, d2_index)


# ------------------------------------------------------------ grid scene
@dataclass(frozen=True, eq=False)
class GridScene:
    """Synthetic multi-resolution scene with a withheld high-resolution truth.

    ``block_map[r, c]`` is the flat LR pixel index owning HR pixel ``(r, c)``.
    ``lr_mask`` is True where the LR target is observed for training. ``d1``
    is None when the LR grid has a single pixel (no bag survives the split).
    """

    hr_covariates: np.ndarray  # (H, W, d_x)
    hr_truth: np.ndarray  # (H, W)
    lr_mediator: np.ndarray  # (h, w)
    lr_targets: np.ndarray  # (h, w)
    lr_mask: np.ndarray  # (h, w) bool
    block_map: np.ndarray  # (H, W) int
    d1: BagDataset | None
    d2: AggregateDataset
    d1_index: np.ndarray
    d2_index: np.ndarray

    @property
    def hr_shape(self) -> tuple[int, int]:
        return self.hr_truth.shape

    @property
    def lr_shape(self) -> tuple[int, int]:
        return self.lr_targets.shape

    def hr_inputs(self) -> np.ndarray:
        """All HR covariate rows in row-major pixel order."""
        return self.hr_covariates.reshape(-1, self.hr_covariates.shape[-1])

    def upsampled_lr(self) -> np.ndarray:
        """Nearest-neighbour upsampling of the LR target field to the HR grid."""
        return self.lr_targets.ravel()[self.block_map]


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], width: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=width, mode="wrap")
    sd = f.std()
    # a single-pixel field has no spread to normalise
    return (f - f.mean()) / sd if sd > 0 else np.zeros(shape)


# weights of the latent HR field: covariate channel, its square, spatial term
TRUTH_WEIGHTS = (2.0, 0.5, 1.0)
TRUTH_CHANNEL = 2


def grid_truth(covariates: np.ndarray) -> np.ndarray:
    """Latent HR field of the synthetic scene.

    ``f = 2 c + 0.5 c**2 + sin(2 pi u) cos(2 pi v)`` where ``c`` is covariate
    channel 2 and ``(u, v)`` are the coordinate channels 0 and 1 in [0, 1].
    """
    a, b, s = TRUTH_WEIGHTS
    c = covariates[..., TRUTH_CHANNEL]
    u, v = covariates[..., 0], covariates[..., 1]
    return a * c + b * c**2 + s * np.sin(2 * np.pi * u) * np.cos(2 * np.pi * v)


def _block_means(field: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = field.shape
    return field.reshape(h, H // h, w, W // w).mean(axis=(1, 3))


def make_grid_scene(
    H: int,
    W: int,
    h: int,
    w: int,
    d_x: int = 4,
    noise_sd: float = 0.1,
    seed: int = 0,
    mediator_noise_sd: float = 0.1,
) -> GridScene:
    """Generate a gridded scene and its indirect bag/target split.

    Channels 0 and 1 of the HR covariates are row and column coordinates
    scaled to [0, 1]; the remaining ``d_x - 2`` channels are standardised
    Gaussian-smoothed noise fields. The LR mediator is the block mean of
    channel 2 plus smooth noise. Half of the LR pixels (``floor(B/2)``,
    chosen at random) keep their HR bags, the others keep their targets.
    """
    if H % h or W % w:
        raise DimensionMismatch(f"HR grid {H}x{W} is not a multiple of LR grid {h}x{w}")
    if d_x < 3:
        raise DimensionMismatch("the grid scene needs d_x >= 3 (two coordinates and one field)")
    rng = np.random.default_rng(seed)
    gen_fields, gen_noise, gen_split = rng.spawn(3)
    rows, cols = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    width = max(H // h, W // w) * 0.75
    channels = [rows, cols] + [_smooth_field(gen_fields, (H, W), width) for _ in range(d_x - 2)]
    cov = np.stack(channels, axis=-1)
    truth = grid_truth(cov)

    mediator = _block_means(cov[..., TRUTH_CHANNEL], h, w)
    mediator = mediator + mediator_noise_sd * _smooth_field(gen_noise, (h, w), 1.0)
    lr_targets = _block_means(truth, h, w) + noise_sd * gen_noise.standard_normal((h, w))

    bh, bw = H // h, W // w
    block_map = (np.arange(H)[:, None] // bh) * w + (np.arange(W)[None, :] // bw)

    B = h * w
    perm = gen_split.permutation(B)
    d1_index = np.sort(perm[: B // 2])
    d2_index = np.sort(perm[B // 2 :])

    lr_r, lr_c = np.divmod(np.arange(B), w)
    lr_cov = np.column_stack([lr_r, lr_c, mediator.ravel()]).astype(float)
    flat_cov = cov.reshape(-1, d_x)
    flat_block = block_map.ravel()
    order = np.argsort(flat_block, kind="stable")
    grouped = flat_cov[order]
    sizes = np.full(B, bh * bw)
    all_bags = BagDataset(grouped, sizes, lr_cov, np.arange(B))
    d1 = all_bags.subset(d1_index) if d1_index.size else None
    d2 = AggregateDataset(lr_cov[d2_index], lr_targets.ravel()[d2_index])
    mask = np.zeros(B, dtype=bool)
    mask[d2_index] = True
    return GridScene(
        hr_covariates=_frozen(cov),
        hr_truth=_frozen(truth),
        lr_mediator=_frozen(mediator),
        lr_targets=_frozen(lr_targets),
        lr_mask=_frozen(mask.reshape(h, w)),
        block_map=_frozen(block_map),
        d1=d1,
        d2=d2,
        d1_index=d1_index,
        d2_index=d2_index,
    )


# ------------------------------------------------------------ CSV I/O
def _fmt(v: float) -> str:
    return format(float(v), FLOAT_FORMAT)


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise EmptyDataset(f"{path}: file is empty") from None
            header = [h.strip() for h in header]
            rows = [(reader.line_num, r) for r in reader if r and any(c.strip() for c in r)]
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not valid UTF-8 ({exc})") from exc
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    return header, rows


def _indexed_columns(header: list[str], prefix: str) -> list[str]:
    cols = [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]
    cols.sort(key=lambda h: int(h[len(prefix):]))
    expected = [f"{prefix}{i}" for i in range(len(cols))]
    if cols != expected:
        missing = sorted(set(expected) - set(cols))
        raise SchemaError(f"columns {prefix}* are not numbered 0..{len(cols) - 1}", missing)
    return cols


def _parse_table(path, header, rows, columns: list[str]) -> np.ndarray:
    pos = [header.index(c) for c in columns]
    out = np.empty((len(rows), len(columns)))
    for k, (line, row) in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"{path}: expected {len(header)} fields, got {len(row)}", line)
        for c, p in enumerate(pos):
            try:
                out[k, c] = float(row[p])
            except ValueError:
                raise ParseError(f"{path}: cannot parse {row[p]!r} in column {columns[c]}", line) from None
    return out


def _require(header: list[str], names: Sequence[str], path, what: str) -> None:
    missing = [n for n in names if n not in header]
    if missing:
        raise SchemaError(f"{path}: not a {what} file", missing)


def read_bags_csv(path) -> BagDataset:
    """Read ``bag_id, y_*, x_*`` rows into a :class:`BagDataset` sorted by bag id."""
    header, rows = _read_rows(path)
    _require(header, ["bag_id", "y_0", "x_0"], path, "bag")
    ycols = _indexed_columns(header, "y_")
    xcols = _indexed_columns(header, "x_")
    table = _parse_table(path, header, rows, ["bag_id"] + ycols + xcols)
    ids = table[:, 0]
    for k, v in enumerate(ids):
        if v < 0 or v != math.floor(v):
            raise ParseError(f"{path}: bag_id must be a nonnegative integer, got {v!r}", rows[k][0])
    ids = ids.astype(np.int64)
    order = np.argsort(ids, kind="stable")
    ids, table = ids[order], table[order]
    uniq, first, counts = np.unique(ids, return_index=True, return_counts=True)
    Y = table[:, 1 : 1 + len(ycols)]
    cov = Y[first]
    if not np.array_equal(np.repeat(cov, counts, axis=0), Y):
        raise ParseError(f"{path}: bag covariates differ within a bag")
    return BagDataset(table[:, 1 + len(ycols) :], counts, cov, uniq)


def write_bags_csv(path, bags: BagDataset) -> None:
    ycols = [f"y_{i}" for i in range(bags.dim_y)]
    xcols = [f"x_{i}" for i in range(bags.dim_x)]
    ids = np.repeat(bags.bag_ids, bags.sizes)
    Y = bags.replicated_covariates
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, quoting=csv.QUOTE_NONE, lineterminator="\n")
        wr.writerow(["bag_id"] + ycols + xcols)
        for i in range(bags.total_points):
            wr.writerow([str(int(ids[i]))] + [_fmt(v) for v in Y[i]] + [_fmt(v) for v in bags.points[i]])


def read_aggregates_csv(path) -> AggregateDataset:
    header, rows = _read_rows(path)
    _require(header, ["y_0", "z"], path, "aggregate")
    ycols = _indexed_columns(header, "y_")
    table = _parse_table(path, header, rows, ycols + ["z"])
    return AggregateDataset(table[:, :-1], table[:, -1])


def write_aggregates_csv(path, agg: AggregateDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, quoting=csv.QUOTE_NONE, lineterminator="\n")
        wr.writerow([f"y_{i}" for i in range(agg.dim_y)] + ["z"])
        for y, z in zip(agg.covariates, agg.targets):
            wr.writerow([_fmt(v) for v in y] + [_fmt(z)])


def _write_xcols(path, X: np.ndarray, extra: dict[str, np.ndarray]) -> None:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    cols = [np.asarray(v, dtype=float).ravel() for v in extra.values()]
    for c in cols:
        if c.shape[0] != X.shape[0]:
            raise DimensionMismatch(f"{c.shape[0]} values for {X.shape[0]} locations")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, quoting=csv.QUOTE_NONE, lineterminator="\n")
        wr.writerow([f"x_{i}" for i in range(X.shape[1])] + list(extra))
        for i in range(X.shape[0]):
            wr.writerow([_fmt(v) for v in X[i]] + [_fmt(c[i]) for c in cols])


def _read_xcols(path, names: list[str]) -> tuple[np.ndarray, np.ndarray]:
    header, rows = _read_rows(path)
    _require(header, ["x_0"] + names, path, "location")
    xcols = _indexed_columns(header, "x_")
    table = _parse_table(path, header, rows, xcols + names)
    return table[:, : len(xcols)], table[:, len(xcols) :]


def write_predictions_csv(path, locations, mean, variance) -> None:
    _write_xcols(path, locations, {"mean": mean, "variance": variance})


def read_predictions_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X, vals = _read_xcols(path, ["mean", "variance"])
    return X, vals[:, 0], vals[:, 1]


def write_truth_csv(path, locations, truth) -> None:
    _write_xcols(path, locations, {"truth": truth})


def read_truth_csv(path) -> tuple[np.ndarray, np.ndarray]:
    X, vals = _read_xcols(path, ["truth"])
    return X, vals[:, 0]


def read_inputs_csv(path) -> np.ndarray:
    """Query locations: every ``x_*`` column of a CSV (other columns ignored)."""
    X, _ = _read_xcols(path, [])
    return X


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
