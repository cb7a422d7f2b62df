import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decond.datasets import AggregateDataset, BagDataset
from decond.embeddings import REPLICATED, SHRINKAGE
from decond.errors import TooManyInducing
from decond.kernels import GAUSSIAN, KernelSpec, gram
from decond.posterior import fit_exact, log_marginal_likelihood
from decond.variational import (
    CURVE_COLUMNS,
    VariationalState,
    _bound,
    data_terms,
    elbo,
    elbo_with_grad,
    init_inducing_kmeanspp,
    init_state,
    kl_term,
    prior_state,
    q_f_mean_var,
    q_f_moments,
    train_variational,
    with_optimal_q,
    write_curve_csv,
)
from instances import instance
from oracles import elbo_dense, kern, kl_dense, point_operator_dense

MODES = (REPLICATED, SHRINKAGE)


def random_state(rng, k, l, d=4, dim_x=2, mode=SHRINKAGE, sigma=0.3, varsigma=0.0):
    w = rng.normal(size=(d, dim_x))
    chol = np.tril(0.3 * rng.normal(size=(d, d)))
    chol[np.diag_indices(d)] = np.exp(rng.uniform(-1, 0.5, d))
    return VariationalState(w, rng.normal(size=d), chol, k, l, 0.05, sigma, varsigma, mode)


# ------------------------------------------------------------ k-means++
def test_kmeans_all_points_is_permutation():
    X = np.random.default_rng(0).normal(size=(12, 2))
    W = init_inducing_kmeanspp(X, 12, 3)
    assert sorted(map(tuple, W)) == sorted(map(tuple, X))


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_separates_two_clusters(seed):
    rng = np.random.default_rng(100 + seed)
    X = np.vstack([rng.normal(size=(50, 2)) - 20, rng.normal(size=(70, 2)) + 20])
    W = init_inducing_kmeanspp(X, 2, seed)
    assert sorted(np.sign(W[:, 0])) == [-1, 1]
    np.testing.assert_allclose(np.sort(W[:, 0]), [X[:50, 0].mean(), X[50:, 0].mean()], atol=1e-12)


def test_kmeans_deterministic_and_bounded():
    X = np.random.default_rng(1).normal(size=(200, 3))
    assert np.array_equal(init_inducing_kmeanspp(X, 7, 5), init_inducing_kmeanspp(X, 7, 5))
    with pytest.raises(TooManyInducing):
        init_inducing_kmeanspp(X, 201, 0)


# ------------------------------------------------------------ q(f)
def test_prior_state_recovers_prior():
    rng, d1, d2, k, l = instance(0)
    s = prior_state(rng.normal(size=(5, 2)), k, l)
    X = rng.normal(size=(8, 2))
    mean, cov = q_f_moments(s, X)
    np.testing.assert_allclose(mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(cov, gram(k, X), atol=1e-8)
    assert abs(kl_term(s)) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_moments_interpolate_at_inducing_points(seed):
    rng, _, _, k, l = instance(seed)
    s = random_state(rng, k, l, d=int(rng.integers(2, 6)))
    mean, cov = q_f_moments(s, s.inducing)
    np.testing.assert_allclose(mean, s.var_mean, atol=1e-8)
    np.testing.assert_allclose(cov, s.var_cov, atol=1e-8)


def test_moments_match_dense_formula():
    rng, _, _, k, l = instance(1, composite=True)
    s = random_state(rng, k, l, d=5)
    X = rng.normal(size=(30, 2))
    Ki = np.linalg.inv(kern(k, s.inducing, s.inducing))
    Kxw = kern(k, X, s.inducing)
    mean, cov = q_f_moments(s, X)
    np.testing.assert_allclose(mean, Kxw @ Ki @ s.var_mean, atol=1e-8)
    np.testing.assert_allclose(
        cov, kern(k, X, X) - Kxw @ (Ki - Ki @ s.var_cov @ Ki) @ Kxw.T, atol=1e-8)
    assert np.array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-8
    m2, v2 = q_f_mean_var(s, X)
    np.testing.assert_allclose(m2, mean, atol=1e-12)
    np.testing.assert_allclose(v2, np.diag(cov), atol=1e-10)


# ------------------------------------------------------------ KL
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_nonnegative_and_dense(seed):
    rng, _, _, k, l = instance(seed)
    s = random_state(rng, k, l, d=int(rng.integers(1, 6)))
    kl = kl_term(s)
    assert kl >= -1e-8
    assert kl == pytest.approx(kl_dense(kern(k, s.inducing, s.inducing), s.var_mean, s.var_cov),
                               rel=1e-7, abs=1e-8)


def test_kl_zero_only_at_prior():
    rng, _, _, k, l = instance(2)
    s = prior_state(rng.normal(size=(3, 2)), k, l)
    assert abs(kl_term(s)) <= 1e-8
    moved = VariationalState(s.inducing, s.var_mean + 1e-3, s.var_chol, k, l, 0.05, 0.3, 0.0)
    assert kl_term(moved) > 1e-8


def test_kl_matches_monte_carlo():
    rng, _, _, k, l = instance(3)
    s = random_state(rng, k, l, d=3)
    Kww = kern(k, s.inducing, s.inducing)
    n = 100_000
    u = s.var_mean + rng.standard_normal((n, 3)) @ s.var_chol.T

    def logpdf(x, mu, C):
        Ci = np.linalg.inv(C)
        d = x - mu
        return -0.5 * np.einsum("ij,jk,ik->i", d, Ci, d) - 0.5 * np.linalg.slogdet(2 * np.pi * C)[1]

    ratio = logpdf(u, s.var_mean, s.var_cov) - logpdf(u, np.zeros(3), Kww)
    est, se = ratio.mean(), ratio.std(ddof=1) / math.sqrt(n)
    assert abs(kl_term(s) - est) <= 3 * se


# ------------------------------------------------------------ bound
@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("varsigma", [0.0, 0.25])
@pytest.mark.parametrize("seed", range(3))
def test_elbo_matches_dense_oracle(seed, varsigma, mode):
    rng, d1, d2, k, l = instance(seed, composite=seed == 1)
    s = random_state(rng, k, l, d=4, mode=mode, sigma=0.4, varsigma=varsigma)
    ref, _ = elbo_dense(d1, d2, k, l, 0.05, mode, s.inducing, s.var_mean, s.var_cov, 0.4, varsigma)
    assert elbo(s, d1, d2) == pytest.approx(ref, abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_elbo_below_exact_lml(seed):
    rng, d1, d2, k, l = instance(40 + seed)
    mode = MODES[seed % 2]
    varsigma = 0.2 if seed % 3 == 0 else 0.0
    exact = log_marginal_likelihood(fit_exact(d1, d2, k, l, 0.05, 0.3, varsigma, mode))
    s = random_state(rng, k, l, d=3, mode=mode, varsigma=varsigma)
    assert elbo(s, d1, d2) <= exact + 1e-6
    assert elbo(with_optimal_q(s, d1, d2), d1, d2) <= exact + 1e-6


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("varsigma", [0.0, 0.3])
def test_bound_tight_with_every_point_inducing(mode, varsigma):
    rng = np.random.default_rng(7)
    d1 = BagDataset(rng.normal(size=(20, 2)), [4, 6, 5, 5], rng.normal(size=(4, 1)))
    d2 = AggregateDataset(rng.normal(size=(5, 1)), rng.normal(size=5))
    _, _, _, k, l = instance(7)
    exact = log_marginal_likelihood(fit_exact(d1, d2, k, l, 0.05, 0.3, varsigma, mode))
    s = with_optimal_q(prior_state(d1.points, k, l, 0.05, 0.3, varsigma, mode), d1, d2)
    assert elbo(s, d1, d2) == pytest.approx(exact, abs=1e-6)


def test_vanishing_sigma_gives_weighted_least_squares():
    rng = np.random.default_rng(8)
    d1 = BagDataset(rng.normal(size=(9, 2)), [3, 2, 4], rng.normal(size=(3, 1)))
    d2 = AggregateDataset(rng.normal(size=(4, 1)), rng.normal(size=4))
    _, _, _, k, l = instance(8)
    # inducing points at every bag point make Sigma_bar vanish with Sigma
    s = VariationalState(d1.points, rng.normal(size=9), 1e-8 * np.eye(9), k, l, 0.05, 0.5, 0.0)
    val = elbo(s, d1, d2) + kl_term(s)
    At = point_operator_dense(d1, d2.covariates, k, l, 0.05, SHRINKAGE)
    r = d2.targets - At.T @ s.var_mean
    wls = -2 * math.log(2 * math.pi * 0.25) - (r @ r) / (2 * 0.25)
    assert val == pytest.approx(wls, abs=1e-6)


def test_hr_noise_with_null_operator_decouples():
    rng = np.random.default_rng(9)
    d1 = BagDataset(rng.normal(size=(6, 1)), [2, 4], [[0.0], [1.0]])
    d2 = AggregateDataset([[1e6], [-1e6]], [0.3, -0.8])
    k = KernelSpec.single(GAUSSIAN, [0], [1.0])
    s = random_state(rng, k, k, d=3, dim_x=1, sigma=0.7, varsigma=0.4)
    lik = elbo(s, d1, d2) + kl_term(s)
    ref = -math.log(2 * math.pi * 0.49) - (0.3**2 + 0.8**2) / (2 * 0.49)
    assert lik == pytest.approx(ref, abs=1e-10)


@pytest.mark.parametrize("varsigma", [0.0, 0.2])
def test_closed_form_gradients_match_differences(varsigma):
    rng, d1, d2, k, l = instance(10)
    s = random_state(rng, k, l, d=4, varsigma=varsigma)
    val, g_eta, g_chol = elbo_with_grad(s, d1, d2)
    terms = data_terms(k, l, 0.05, SHRINKAGE, s.inducing, d1, d2)
    h = 1e-6

    def f(eta, chol):
        return _bound(terms, d2.targets, eta, chol, 0.3, varsigma)

    assert val == pytest.approx(f(s.var_mean, s.var_chol), abs=1e-12)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (f(s.var_mean + e, s.var_chol) - f(s.var_mean - e, s.var_chol)) / (2 * h)
        assert g_eta[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)
    for i, j in zip(*np.tril_indices(4)):
        E = np.zeros((4, 4))
        E[i, j] = h
        fd = (f(s.var_mean, s.var_chol + E) - f(s.var_mean, s.var_chol - E)) / (2 * h)
        assert g_chol[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-7)


@pytest.mark.parametrize("varsigma", [0.0, 0.2])
def test_optimal_q_is_stationary(varsigma):
    rng, d1, d2, k, l = instance(11)
    s = with_optimal_q(random_state(rng, k, l, d=4, varsigma=varsigma), d1, d2)
    _, g_eta, g_chol = elbo_with_grad(s, d1, d2)
    assert np.max(np.abs(g_eta)) < 1e-6 and np.max(np.abs(g_chol)) < 1e-6
    base = elbo(s, d1, d2)
    for _ in range(5):
        other = VariationalState(s.inducing, s.var_mean + 0.05 * rng.normal(size=4),
                                 s.var_chol, k, l, 0.05, 0.3, varsigma)
        assert elbo(other, d1, d2) <= base


# ------------------------------------------------------------ training
def _problem(seed=12):
    rng, d1, d2, k, l = instance(seed, n_bags=6, n_targets=6)
    return init_state(d1, k, l, 4, seed, 0.05, 0.5, 0.0), d1, d2


def test_zero_steps_unchanged():
    s, d1, d2 = _problem()
    assert train_variational(s, d1, d2, 0) is s


@pytest.mark.parametrize("whiten", [True, False])
def test_training_best_seen(whiten):
    s, d1, d2 = _problem()
    out = train_variational(s, d1, d2, 30, whiten=whiten)
    e0, e1 = elbo(s, d1, d2), elbo(out, d1, d2)
    assert e1 >= e0
    assert out.curve[0][1] == pytest.approx(e0, abs=1e-9)
    assert e1 == pytest.approx(max(c[1] for c in out.curve), abs=1e-8)
    assert np.all(np.diagonal(out.var_chol) > 0)


def test_kl_nonnegative_along_training():
    s, d1, d2 = _problem(13)
    for _ in range(6):
        s = train_variational(s, d1, d2, 3)
        assert kl_term(s) >= -1e-8
    steps = [c[0] for c in s.curve]
    assert steps == sorted(steps)


def test_training_improves_on_prior_noise_start():
    s, d1, d2 = _problem(14)
    out = train_variational(s, d1, d2, 60)
    assert elbo(out, d1, d2) > elbo(s, d1, d2) + 1.0


def test_curve_csv(tmp_path):
    s, d1, d2 = _problem()
    out = train_variational(s, d1, d2, 3)
    path = tmp_path / "curve.csv"
    write_curve_csv(path, out.curve)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CURVE_COLUMNS)
    assert len(lines) == len(out.curve) + 1
    assert float(lines[1].split(",")[1]) == out.curve[0][1]


def test_state_validation():
    rng, _, _, k, l = instance(0)
    w = rng.normal(size=(2, 2))
    with pytest.raises(ValueError):
        VariationalState(w, np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]), k, l, 0.05, 0.1, 0.0)
    with pytest.raises(ValueError):
        VariationalState(w, np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), k, l, 0.05, 0.1, 0.0)
