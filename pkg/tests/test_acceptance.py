"""Acceptance criteria, one test per criterion.

Each test records a one-line verdict; the lines are printed at the end of
the pytest run (and by ``python3 tests/test_acceptance.py``). The benchmark
criteria take tens of minutes on one core; deselect them with
``-m "not long"``.
"""

from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from decond._optim import fd_gradient  # noqa: E402
from decond.benchmark import ablate_shrinkage, run_benchmark, summarize  # noqa: E402
from decond.embeddings import REPLICATED, SHRINKAGE, dmo_estimate_f  # noqa: E402
from decond.kernels import GAUSSIAN, KernelSpec, KernelTerm, gram, rff_build  # noqa: E402
from decond.posterior import (  # noqa: E402
    fit_exact,
    log_marginal_likelihood,
    posterior_cov,
    posterior_mean,
    posterior_var,
)
from decond.variational import (  # noqa: E402
    VariationalState,
    elbo,
    kl_term,
    q_f_moments,
    with_optimal_q,
)
from instances import instance, spread_instance  # noqa: E402
from oracles import bag_mean_dense, dmo_gd, kern  # noqa: E402

VERDICTS: list[str] = []


def record(number: int, title: str, ok: bool, detail: str, seconds: float, budget: float) -> None:
    ok_all = ok and seconds < budget
    VERDICTS.append(f"criterion {number} {'PASS' if ok_all else 'FAIL'}  {title}: {detail}"
                    f"  [{seconds:.1f} s of {budget:.0f} s]")
    print(VERDICTS[-1])
    assert ok, detail
    assert seconds < budget, f"runtime {seconds:.1f} s exceeds {budget} s"


# ------------------------------------------------------------ 1
def test_criterion_1_operator_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(5000 + seed)
        _, d1, d2, k, l = instance(5000 + seed, n_bags=int(rng.integers(2, 9)),
                                   n_targets=int(rng.integers(1, 7)))
        eps = float(np.exp(rng.uniform(-3, 0)))
        X = rng.normal(size=(50, 2))
        model = fit_exact(d1, d2, k, l, 0.05, math.sqrt(d2.size * eps), 0.0, REPLICATED, 0.0)
        f = dmo_estimate_f(d1, d2, k, l, 0.05, eps, X)
        worst = max(worst, float(np.max(np.abs(posterior_mean(model, X) - f))))
    record(1, "operator identity", worst <= 1e-8, f"max deviation {worst:.2e} (<= 1e-8)",
           time.perf_counter() - t0, 10)


# ------------------------------------------------------------ 2
def test_criterion_2_gradient_descent_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng, d1, d2, k, l = spread_instance(seed)
        X = rng.normal(size=(30, 2))
        f_gd = dmo_gd(d1, d2, k, l, 0.05, 0.2, X)
        worst = max(worst, float(np.max(np.abs(f_gd - dmo_estimate_f(d1, d2, k, l, 0.05, 0.2, X)))))
    record(2, "gradient descent reaches closed form", worst <= 1e-4,
           f"sup-norm gap {worst:.2e} (<= 1e-4)", time.perf_counter() - t0, 60)


# ------------------------------------------------------------ 3
def test_criterion_3_vbagg_special_case():
    from decond.baselines import fit_bagg_gp

    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(6000 + seed)
        _, d1, _, k, _ = instance(6000 + seed, composite=seed % 2 == 1)
        z = rng.normal(size=d1.n_bags)
        X = 2 * rng.normal(size=(100, 2))
        sigma = 0.1 + 0.05 * seed
        S = bag_mean_dense(k, d1) + sigma**2 * np.eye(d1.n_bags)
        U = bag_mean_dense(k, d1, X)
        mean = U @ np.linalg.solve(S, z)
        var = np.diag(kern(k, X, X) - U @ np.linalg.solve(S, U.T))
        model = fit_bagg_gp(d1, z, k, sigma)
        worst = max(worst, float(np.max(np.abs(posterior_mean(model, X) - mean))),
                    float(np.max(np.abs(posterior_var(model, X) - var))))
    record(3, "delta-kernel shrinkage equals aggregated GP", worst <= 1e-8,
           f"max deviation {worst:.2e} (<= 1e-8)", time.perf_counter() - t0, 30)


# ------------------------------------------------------------ 4
def _random_state(rng, k, l, d, mode, varsigma):
    w = rng.normal(size=(d, 2))
    chol = np.tril(0.3 * rng.normal(size=(d, d)))
    chol[np.diag_indices(d)] = np.exp(rng.uniform(-1, 0.5, d))
    return VariationalState(w, rng.normal(size=d), chol, k, l, 0.05, 0.3, varsigma, mode)


def test_criterion_4_variational_soundness():
    t0 = time.perf_counter()
    gap, kl_min, interp = -np.inf, np.inf, 0.0
    for seed in range(10):
        rng, d1, d2, k, l = instance(7000 + seed)
        mode = (REPLICATED, SHRINKAGE)[seed % 2]
        varsigma = 0.2 if seed % 3 == 0 else 0.0
        exact = log_marginal_likelihood(fit_exact(d1, d2, k, l, 0.05, 0.3, varsigma, mode))
        for s in (_random_state(rng, k, l, 3, mode, varsigma),
                  with_optimal_q(_random_state(rng, k, l, 4, mode, varsigma), d1, d2)):
            gap = max(gap, elbo(s, d1, d2) - exact)
            kl_min = min(kl_min, kl_term(s))
            mean, cov = q_f_moments(s, s.inducing)
            interp = max(interp, float(np.max(np.abs(mean - s.var_mean))),
                         float(np.max(np.abs(cov - s.var_cov))))
    ok = gap <= 1e-6 and kl_min >= -1e-8 and interp <= 1e-8
    record(4, "variational soundness", ok,
           f"max ELBO - LML {gap:.2e} (<= 1e-6), min KL {kl_min:.2e} (>= -1e-8), "
           f"interpolation error {interp:.2e} (<= 1e-8)", time.perf_counter() - t0, 60)


# ------------------------------------------------------------ 5
def test_criterion_5_shrinkage_ablation():
    t0 = time.perf_counter()
    parts, ok, speedup = [], True, math.nan
    for n_bags, n_per in ((3, 50), (50, 3), (50, 500), (500, 50)):
        rep, shr = ablate_shrinkage(n_bags, n_per, seed=0)
        ok &= rep.rmse_between_modes <= 0.05
        parts.append(f"({n_bags},{n_per}) rmse {rep.rmse_between_modes:.3g} {rep.precision}")
        if (n_bags, n_per) == (50, 500):
            speedup = rep.wall_clock / shr.wall_clock
    ok &= speedup >= 20
    record(5, "shrinkage ablation", ok, "; ".join(parts) + f"; speedup {speedup:.0f}x (>= 20x)",
           time.perf_counter() - t0, 300)


# ------------------------------------------------------------ 6 to 8
SEEDS = range(10)


def _means(cells):
    return {r["model"]: r for r in summarize(cells)}


@pytest.mark.long
@pytest.mark.acceptance
def test_criterion_6_swissroll_direct():
    t0 = time.perf_counter()
    cells = run_benchmark("swissroll-direct", SEEDS)
    s = _means(cells)
    rm = {m: s[m]["rmse_mean"] for m in s}
    failed = sum(s[m]["n_failed"] for m in s)
    ok = (failed == 0 and all(rm[m] < rm["gpr"] for m in ("cmp", "s-cmp", "varcmp"))
          and rm["varcmp"] < rm["bagg-gp"])
    detail = ", ".join(f"{m} {v:.3f}" for m, v in rm.items()) + f"; failed cells {failed}"
    record(6, "swiss roll direct ordering", ok, detail, time.perf_counter() - t0, 20 * 60)


@pytest.mark.long
@pytest.mark.acceptance
def test_criterion_7_swissroll_indirect():
    t0 = time.perf_counter()
    models = ("cmp", "varcmp", "bagg-gp", "vbagg")
    ind = _means(run_benchmark("swissroll-indirect", SEEDS, models))
    direct = _means(run_benchmark("swissroll-direct", SEEDS, ("cmp",)))
    rm = {m: ind[m]["rmse_mean"] for m in ind}
    failed = sum(ind[m]["n_failed"] for m in ind) + direct["cmp"]["n_failed"]
    ok = (failed == 0 and rm["cmp"] < rm["vbagg"] and rm["cmp"] < rm["bagg-gp"]
          and rm["cmp"] > direct["cmp"]["rmse_mean"])
    detail = (", ".join(f"{m} {v:.3f}" for m, v in rm.items())
              + f"; cmp direct {direct['cmp']['rmse_mean']:.3f}; failed cells {failed}")
    record(7, "swiss roll indirect ordering", ok, detail, time.perf_counter() - t0, 25 * 60)


@pytest.mark.long
@pytest.mark.acceptance
def test_criterion_8_grid_downscaling():
    t0 = time.perf_counter()
    cells = run_benchmark("grid", SEEDS)
    by = {(c.seed, c.model): c for c in cells}
    rmse_wins = ssim_wins = 0
    for seed in SEEDS:
        v = by[(seed, "varcmp")]
        if v.status != "ok":
            continue
        rivals = [by[(seed, m)] for m in ("vbagg", "vargpr")]
        rmse_wins += all(r.status != "ok" or v.rmse < r.rmse for r in rivals)
        ssim_wins += v.ssim > by[(seed, "upsampled-lr")].ssim
    ok = rmse_wins >= 7 and ssim_wins >= 7
    s = _means(cells)
    detail = (f"RMSE wins {rmse_wins}/10 (>= 7), SSIM wins {ssim_wins}/10 (>= 7); mean RMSE "
              + ", ".join(f"{m} {r['rmse_mean']:.3f}" for m, r in s.items()))
    record(8, "grid downscaling", ok, detail, time.perf_counter() - t0, 40 * 60)


# ------------------------------------------------------------ 9
def test_criterion_9_numerical_hygiene():
    t0 = time.perf_counter()
    eig_min, var_excess, fd_worst = np.inf, -np.inf, 0.0
    for seed in range(20):
        rng, d1, d2, k, l = instance(8000 + seed, composite=seed % 2 == 1)
        X = 2 * rng.normal(size=(40, 2))
        for mode in (REPLICATED, SHRINKAGE):
            model = fit_exact(d1, d2, k, l, 0.05, 0.05 + 0.05 * (seed % 4), 0.1 * (seed % 3), mode)
            eig_min = min(eig_min, float(np.linalg.eigvalsh(model.Q).min()),
                          float(np.linalg.eigvalsh(posterior_cov(model, X)).min()))
            var_excess = max(var_excess, float(np.max(posterior_var(model, X) - np.diag(gram(k, X)))))
    for seed in range(10):
        rng, d1, d2, k, l = instance(300 + seed)
        theta0 = np.concatenate([k.log_params(), l.log_params(), [math.log(0.3)]])
        theta0 = theta0 + 0.3 * rng.standard_normal(theta0.size)

        def lml(theta):
            kk = k.with_log_params(theta[: k.n_params])
            ll = l.with_log_params(theta[k.n_params : k.n_params + l.n_params])
            return log_marginal_likelihood(fit_exact(d1, d2, kk, ll, 0.05, math.exp(theta[-1])))

        g3, g5 = fd_gradient(lml, theta0, 1e-3), fd_gradient(lml, theta0, 1e-5)
        fd_worst = max(fd_worst, float(np.linalg.norm(g3 - g5) / np.linalg.norm(g5)))
    term = KernelTerm(GAUSSIAN, (0, 1, 2), (1.0, 1.0, 1.0), 1.0)
    spec = KernelSpec((term,))
    rff_worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        A, B = rng.uniform(size=(200, 3)), rng.uniform(size=(200, 3))
        m = rff_build(term, 4096, seed=seed)
        approx = np.sum(m.transform(A) * m.transform(B), axis=1)
        exact = np.exp(-0.5 * np.sum((A - B) ** 2, axis=1))
        assert np.allclose(exact, np.diag(gram(spec, A, B)), atol=1e-12)
        rff_worst = max(rff_worst, float(np.max(np.abs(approx - exact))))
    ok = eig_min >= -1e-8 and var_excess <= 1e-10 and fd_worst <= 0.01 and rff_worst <= 0.05
    record(9, "numerical hygiene", ok,
           f"min eigenvalue {eig_min:.1e} (>= -1e-8), max var - prior {var_excess:.1e} (<= 0), "
           f"FD rel gap {fd_worst:.1e} (<= 1%), RFF max error {rff_worst:.3f} (<= 0.05)",
           time.perf_counter() - t0, 300)


def main() -> int:
    """Run the criteria in order and print the verdict lines."""
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    for t in tests:
        try:
            t()
        except AssertionError:
            pass
    print("\n".join(VERDICTS))
    return 0 if all(" PASS " in v for v in VERDICTS) else 1


if __name__ == "__main__":
    sys.exit(main())
