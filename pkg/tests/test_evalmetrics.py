import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from decond.errors import DimensionMismatch, GridTooSmall, ZeroVariance
from decond.evalmetrics import (
    SCORE_COLUMNS,
    mae,
    pearson,
    read_scores_csv,
    rmse,
    score,
    ssim,
    write_scores_csv,
)
from oracles import ssim_loops

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_identity_scores():
    t = np.array([0.5, 2.0, -1.0, 4.0])
    assert rmse(t, t) == 0.0 and mae(t, t) == 0.0
    assert pearson(t, t) == pytest.approx(1.0)


def test_constant_offset():
    t = np.array([0.5, 2.0, -1.0, 4.0])
    assert rmse(t + 1, t) == pytest.approx(1.0)
    assert mae(t + 1, t) == pytest.approx(1.0)
    assert pearson(t + 1, t) == pytest.approx(1.0)


def test_hand_computed_pair():
    assert rmse([0, 2], [1, 1]) == pytest.approx(1.0)
    assert mae([0, 2], [1, 1]) == pytest.approx(1.0)
    with pytest.raises(ZeroVariance):
        pearson([0, 2], [1, 1])


def test_pearson_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(50), rng.standard_normal(50)
    assert pearson(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)


def test_length_checks():
    with pytest.raises(DimensionMismatch):
        rmse([1, 2], [1])
    with pytest.raises(DimensionMismatch):
        pearson([1], [1])


def test_ssim_identity():
    g = np.random.default_rng(1).standard_normal((16, 24))
    assert ssim(g, g) == pytest.approx(1.0)


def test_ssim_negated_zero_mean_grid():
    r, c = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    # every 8x8 window has mean zero
    g = np.sin(2 * np.pi * (r + 0.5) / 8) + np.cos(2 * np.pi * c / 8)
    assert ssim(-g, g) < 0


def test_ssim_checkerboard_vs_uniform_matches_loops():
    r, c = np.meshgrid(np.arange(16), np.arange(24), indexing="ij")
    board = ((r + c) % 2).astype(float)
    flat = np.full_like(board, board.mean())
    assert ssim(flat, board) == pytest.approx(ssim_loops(flat, board), abs=1e-10)


def test_ssim_random_matches_loops_with_border():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((19, 27)), rng.standard_normal((19, 27))
    assert ssim(a, b) == pytest.approx(ssim_loops(a, b), abs=1e-10)


def test_ssim_too_small():
    with pytest.raises(GridTooSmall):
        ssim(np.zeros((7, 9)), np.zeros((7, 9)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite),
                                                        arrays(float, n, elements=finite))))
def test_rmse_at_least_mae(pair):
    p, t = pair
    assert rmse(p, t) >= mae(p, t) - 1e-12 * (1 + mae(p, t))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_flat_metrics_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.standard_normal(n), rng.standard_normal(n)
    perm = rng.permutation(n)
    assert rmse(p[perm], t[perm]) == pytest.approx(rmse(p, t), rel=1e-12)
    assert mae(p[perm], t[perm]) == pytest.approx(mae(p, t), rel=1e-12)
    assert pearson(p[perm], t[perm]) == pytest.approx(pearson(p, t), abs=1e-12)
    assert -1.0 <= pearson(p, t) <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 24), st.integers(8, 24), st.integers(0, 2**31 - 1))
def test_ssim_transpose_invariant(H, W, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((H, W)), rng.standard_normal((H, W))
    s = ssim(a, b)
    assert ssim(a.T, b.T) == pytest.approx(s, abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_score_report_and_csv(tmp_path):
    rng = np.random.default_rng(3)
    t = rng.standard_normal(64)
    p = t + 0.1 * rng.standard_normal(64)
    flat = score(p, t, "m", 4)
    grid = score(p, t, "g", 5, grid_shape=(8, 8))
    assert flat.ssim is None and grid.ssim == pytest.approx(ssim(p.reshape(8, 8), t.reshape(8, 8)))
    assert flat.rmse >= flat.mae and flat.n_points == 64
    const = score([1.0, 1.0], [0.0, 2.0])
    assert math.isnan(const.pearson)
    path = tmp_path / "s.csv"
    write_scores_csv(path, [flat])
    write_scores_csv(path, [grid], append=True)
    assert path.read_text().splitlines()[0] == ",".join(SCORE_COLUMNS)
    rows = read_scores_csv(path)
    assert [r["model"] for r in rows] == ["m", "g"]
    assert rows[0]["ssim"] is None and rows[1]["seed"] == 5
    assert rows[1]["rmse"] == grid.rmse
