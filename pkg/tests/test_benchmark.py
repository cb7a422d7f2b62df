import math

import numpy as np
import pytest

import decond.benchmark as bm
from decond.benchmark import (
    UPSAMPLED,
    Cell,
    ProtocolSizes,
    ablate_shrinkage,
    ablation_data,
    run_benchmark,
    run_seed,
    summarize,
    workers,
)
from decond.errors import DegenerateNoise

SMALL = ProtocolSizes(n_points=200, n_bags=6, grid_hr=(12, 16), grid_lr=(3, 4))
FAST = dict(steps=2, variational_steps=3, n_inducing=8)


@pytest.mark.parametrize("protocol", ["swissroll-direct", "swissroll-indirect"])
def test_one_row_per_model_and_seed(protocol):
    cells = run_seed(protocol, 1, sizes=SMALL, overrides=FAST)
    assert [c.model for c in cells] == list(bm.SWISSROLL_MODELS)
    for c in cells:
        assert c.status == "ok" and c.protocol == protocol and c.seed == 1
        assert c.rmse >= c.mae >= 0 and c.ssim is None


def test_grid_rows_include_upsampled_reference():
    cells = run_seed("grid", 0, sizes=SMALL, overrides=FAST)
    assert [c.model for c in cells] == list(bm.GRID_MODELS) + [UPSAMPLED]
    assert all(c.status == "ok" and c.ssim is not None for c in cells)
    assert all(c.n_points == 12 * 16 for c in cells)


def test_failures_become_marked_rows(monkeypatch):
    def boom(d1, d2, settings):
        if settings.name == "gpr":
            raise DegenerateNoise("forced")
        return real(d1, d2, settings)

    real = bm.fit_model
    monkeypatch.setattr(bm, "fit_model", boom)
    cells = run_seed("swissroll-direct", 0, ["cmp", "gpr"], SMALL, FAST)
    assert [(c.model, c.status) for c in cells] == [("cmp", "ok"), ("gpr", "DegenerateNoise")]
    assert math.isnan(cells[1].rmse)
    rows = summarize(cells)
    assert rows[1]["n_ok"] == 0 and rows[1]["n_failed"] == 1 and math.isnan(rows[1]["rmse_mean"])


def test_run_seed_is_deterministic():
    a = run_seed("swissroll-direct", 2, ["s-cmp", "varcmp"], SMALL, FAST)
    b = run_seed("swissroll-direct", 2, ["s-cmp", "varcmp"], SMALL, FAST)
    assert [c.rmse for c in a] == [c.rmse for c in b]


def test_unknown_protocol():
    with pytest.raises(ValueError):
        run_seed("mnist", 0)
    with pytest.raises(ValueError):
        run_benchmark("grid", [])


def test_parallel_and_serial_runs_agree(monkeypatch):
    got = {}
    for threads in ("1", "2"):
        monkeypatch.setenv("DECOND_THREADS", threads)
        seen = []
        cells = run_benchmark("swissroll-direct", [0, 1], ["gpr"], SMALL, FAST, on_cells=seen.append)
        assert len(seen) == 2
        got[threads] = [(c.seed, c.model, c.rmse) for c in cells]
    assert got["1"] == got["2"]


def test_workers_env(monkeypatch):
    monkeypatch.setenv("DECOND_THREADS", "3")
    assert workers() == 3
    monkeypatch.setenv("DECOND_THREADS", "lots")
    assert workers() >= 1


def test_summary_statistics():
    cells = [Cell("p", s, "m", rmse=r, mae=r / 2, pearson=0.5) for s, r in enumerate([1.0, 2.0, 4.0])]
    row = summarize(cells)[0]
    assert row["rmse_mean"] == pytest.approx(7 / 3)
    assert row["rmse_sd"] == pytest.approx(np.std([1.0, 2.0, 4.0], ddof=1))
    assert math.isnan(row["ssim_mean"]) and row["pearson_sd"] == 0.0


def test_ablation_generator():
    d = ablation_data(400, 3, 0)
    assert d.n_bags == 400 and d.total_points == 1200
    assert np.var(d.covariates) == pytest.approx(2.0, rel=0.2)
    y = np.repeat(d.covariates[:, 0], 3)
    resid = d.points[:, 0] - y * np.sin(y)
    assert np.std(resid) == pytest.approx(0.5, rel=0.1)


def test_ablation_rows():
    rows = ablate_shrinkage(3, 30, seed=1, grid=20)
    assert [r.mode for r in rows] == ["replicated", "shrinkage"]
    assert rows[0].rmse_between_modes == rows[1].rmse_between_modes <= 0.05
    assert all(r.wall_clock > 0 and r.precision == "float64" for r in rows)
    with pytest.raises(ValueError):
        ablate_shrinkage(0, 5)


def test_ablation_single_bag_is_finite():
    rows = ablate_shrinkage(1, 5, grid=10)
    assert np.isfinite(rows[0].rmse_between_modes)
