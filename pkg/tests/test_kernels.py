import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decond.errors import DimensionMismatch, NonPositiveHyperparameter, UnsupportedFamily
from decond.kernels import (
    DELTA,
    GAUSSIAN,
    MATERN32,
    GramCache,
    KernelSpec,
    KernelTerm,
    gram,
    init_lengthscales,
    median_heuristic,
    rff_build,
    rff_gram,
    rff_maps_for,
    term_base_tangents,
)


def loop_gram(spec, X, X2):
    """Entry-by-entry reference evaluation of a sum kernel."""
    out = np.zeros((X.shape[0], X2.shape[0]))
    for i in range(X.shape[0]):
        for j in range(X2.shape[0]):
            for t in spec.terms:
                a, b = X[i, list(t.features)], X2[j, list(t.features)]
                if t.family == DELTA:
                    v = 1.0 if np.array_equal(a, b) else 0.0
                else:
                    r = math.sqrt(sum(((p - q) / s) ** 2 for p, q, s in zip(a, b, t.lengthscales)))
                    v = math.exp(-0.5 * r * r) if t.family == GAUSSIAN else (1 + math.sqrt(3) * r) * math.exp(-math.sqrt(3) * r)
                out[i, j] += t.variance * v
    return out


def test_gaussian_at_zero_distance_is_variance():
    k = KernelSpec.single(GAUSSIAN, [0], [1.0], 1.0)
    assert gram(k, [[0.3]], [[0.3]])[0, 0] == 1.0


def test_gaussian_unit_distance():
    k = KernelSpec.single(GAUSSIAN, [0], [1.0], 1.0)
    assert gram(k, [[0.0]], [[1.0]])[0, 0] == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert math.exp(-0.5) == pytest.approx(0.60653, abs=1e-5)


def test_delta_on_index_column():
    k = KernelSpec.single(DELTA, [0])
    G = gram(k, [[3.0]], [[3.0], [4.0]])
    np.testing.assert_array_equal(G, [[1.0, 0.0]])


def test_delta_rejects_float_codes():
    with pytest.raises(UnsupportedFamily):
        gram(KernelSpec.single(DELTA, [0]), [[0.5]], [[0.5]])


def test_bad_terms_rejected():
    with pytest.raises(UnsupportedFamily):
        KernelTerm("cosine", (0,), (1.0,))
    with pytest.raises(NonPositiveHyperparameter):
        KernelTerm(GAUSSIAN, (0,), (0.0,))
    with pytest.raises(DimensionMismatch):
        KernelTerm(GAUSSIAN, (0, 1), (1.0,))
    with pytest.raises(DimensionMismatch):
        gram(KernelSpec.single(GAUSSIAN, [3], [1.0]), np.zeros((2, 2)))


def test_matches_loop_reference():
    rng = np.random.default_rng(0)
    spec = KernelSpec((
        KernelTerm(MATERN32, (0, 1), (0.7, 1.3), 0.8),
        KernelTerm(GAUSSIAN, (2,), (0.5,), 1.7),
        KernelTerm(DELTA, (3,), (), 0.3),
    ))
    X = np.column_stack([rng.normal(size=(7, 3)), rng.integers(0, 3, 7)])
    X2 = np.column_stack([rng.normal(size=(5, 3)), rng.integers(0, 3, 5)])
    np.testing.assert_allclose(gram(spec, X, X2), loop_gram(spec, X, X2), atol=1e-13)


def test_sum_equals_sum_of_terms():
    rng = np.random.default_rng(1)
    t1 = KernelTerm(MATERN32, (0,), (0.9,), 1.1)
    t2 = KernelTerm(GAUSSIAN, (1, 2), (0.6, 2.0), 0.4)
    X = rng.normal(size=(20, 3))
    total = gram(KernelSpec((t1, t2)), X)
    parts = gram(KernelSpec((t1,)), X) + gram(KernelSpec((t2,)), X)
    np.testing.assert_allclose(total, parts, atol=1e-12)


spec_strategy = st.sampled_from([GAUSSIAN, MATERN32])


@settings(max_examples=40, deadline=None)
@given(spec_strategy, st.integers(1, 50), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_gram_symmetric_psd(family, n, d, seed):
    rng = np.random.default_rng(seed)
    ls = tuple(np.exp(rng.uniform(-1, 1, d)))
    k = KernelSpec.single(family, range(d), ls, float(np.exp(rng.uniform(-1, 1))))
    X = rng.normal(size=(n, d))
    G = gram(k, X)
    np.testing.assert_array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() >= -1e-8


@settings(max_examples=30, deadline=None)
@given(spec_strategy, st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_gram_transpose_exact(family, n, m, seed):
    rng = np.random.default_rng(seed)
    k = KernelSpec.single(family, [0, 1], [0.8, 1.4], 1.3)
    X, X2 = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
    np.testing.assert_array_equal(gram(k, X, X2).T, gram(k, X2, X))


def test_median_heuristic_examples():
    assert median_heuristic([[0.0], [1.0]]) == 1.0
    assert median_heuristic([[0.0], [1.0], [2.0]]) == 1.0


def test_median_heuristic_normal_samples():
    # about 2% of samples fall below 0.8, so this is a statistical check
    for seed in range(100, 110):
        x = np.random.default_rng(seed).standard_normal((100, 1))
        assert 0.8 <= median_heuristic(x) <= 1.6


def test_median_heuristic_population_value():
    # |X - X'| ~ |N(0, 2)| has median sqrt(2) * Phi^{-1}(3/4)
    from scipy.stats import norm

    vals = [median_heuristic(np.random.default_rng(s).standard_normal((100, 1))) for s in range(400)]
    assert np.mean(vals) == pytest.approx(math.sqrt(2.0) * norm.ppf(0.75), abs=0.01)


def test_median_heuristic_subsamples_deterministically():
    X = np.random.default_rng(0).normal(size=(3000, 2))
    assert median_heuristic(X, seed=5) == median_heuristic(X, seed=5)


def test_init_lengthscales_per_feature():
    X = np.column_stack([np.arange(3.0), 10 * np.arange(3.0)])
    assert init_lengthscales(X, [0, 1]) == (1.0, 10.0)


def test_rff_single_point_bounded():
    term = KernelTerm(GAUSSIAN, (0, 1), (1.0, 1.0), 2.0)
    m = rff_build(term, 64, seed=0)
    v = rff_gram(m, [[0.2, 0.4]])[0, 0]
    assert 0.0 <= v <= 2.0 * term.variance


def test_rff_accuracy_d4096():
    term = KernelTerm(GAUSSIAN, (0, 1, 2), (1.0, 1.0, 1.0), 1.0)
    exact_k = KernelSpec((term,))
    good = 0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        A, B = rng.uniform(size=(200, 3)), rng.uniform(size=(200, 3))
        m = rff_build(term, 4096, seed=seed)
        approx = np.sum(m.transform(A) * m.transform(B), axis=1)
        exact = np.array([gram(exact_k, A[i : i + 1], B[i : i + 1])[0, 0] for i in range(200)])
        good += np.max(np.abs(approx - exact)) <= 0.05
    assert good >= 9


def test_rff_same_seed_identical():
    term = KernelTerm(GAUSSIAN, (0,), (0.5,), 1.0)
    X = np.linspace(0, 1, 7)[:, None]
    np.testing.assert_array_equal(rff_gram(rff_build(term, 32, 3), X), rff_gram(rff_build(term, 32, 3), X))


def test_rff_only_gaussian_terms():
    with pytest.raises(UnsupportedFamily):
        rff_build(KernelTerm(MATERN32, (0,), (1.0,)), 8, 0)
    spec = KernelSpec((KernelTerm(MATERN32, (0,), (1.0,)), KernelTerm(GAUSSIAN, (1,), (1.0,))))
    assert list(rff_maps_for(spec, 8, 0)) == [1]


def test_log_params_round_trip():
    spec = KernelSpec((KernelTerm(MATERN32, (0, 1), (0.5, 2.0), 3.0), KernelTerm(DELTA, (2,), (), 0.2)))
    assert spec.n_params == 4
    back = spec.with_log_params(spec.log_params())
    for a, b in zip(back.terms, spec.terms):
        assert a.family == b.family and a.features == b.features
        np.testing.assert_allclose(a.lengthscales, b.lengthscales, rtol=1e-15)
        assert a.variance == pytest.approx(b.variance, rel=1e-15)


def test_sections_round_trip():
    spec = KernelSpec((KernelTerm(MATERN32, (0, 1), (0.5, 2.0), 3.0), KernelTerm(DELTA, (2,), (), 0.2)))
    assert KernelSpec.from_sections(spec.to_sections("k"), "k") == spec


@pytest.mark.parametrize("family", [GAUSSIAN, MATERN32])
def test_tangents_match_finite_differences(family):
    rng = np.random.default_rng(2)
    term = KernelTerm(family, (0, 1), (0.8, 1.5), 1.0)
    X, X2 = rng.normal(size=(9, 2)), rng.normal(size=(6, 2))
    parts = list(term_base_tangents(term, X, X2))
    np.testing.assert_allclose(parts[0], gram(KernelSpec((term,)), X, X2), atol=1e-14)
    h = 1e-6
    for r in range(2):
        ls = np.log(term.lengthscales)
        up, dn = ls.copy(), ls.copy()
        up[r] += h
        dn[r] -= h
        gp = gram(KernelSpec.single(family, (0, 1), np.exp(up)), X, X2)
        gm = gram(KernelSpec.single(family, (0, 1), np.exp(dn)), X, X2)
        np.testing.assert_allclose(parts[1 + r], (gp - gm) / (2 * h), atol=1e-6)


def test_cache_variance_applied_on_the_way_out():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(5, 2))
    cache = GramCache()
    k1 = KernelSpec.single(GAUSSIAN, (0, 1), (1.0, 2.0), 1.0)
    k2 = KernelSpec.single(GAUSSIAN, (0, 1), (1.0, 2.0), 3.0)
    np.testing.assert_allclose(cache.gram(k1, "x", X), gram(k1, X), atol=1e-15)
    np.testing.assert_allclose(cache.gram(k2, "x", X), gram(k2, X), atol=1e-15)
    assert cache.hits == 1 and cache.misses == 1


def test_cache_lru_bound():
    cache = GramCache(max_entries=2)
    X = np.zeros((2, 1))
    for ls in (1.0, 2.0, 3.0):
        cache.gram(KernelSpec.single(GAUSSIAN, (0,), (ls,)), "x", X)
    assert len(cache._store) == 2


def test_linearized_central_difference_close_to_exact():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 2))
    h = 1e-4
    term = KernelTerm(GAUSSIAN, (0, 1), (0.9, 1.2), 1.0)
    cache = GramCache(linear_step=h, linear_min=1)
    cache.gram(KernelSpec((term,)), "x", X)
    ls = np.log(term.lengthscales)
    up, dn = ls.copy(), ls.copy()
    up[1] += h
    dn[1] -= h
    kp = KernelSpec.single(GAUSSIAN, (0, 1), np.exp(up))
    km = KernelSpec.single(GAUSSIAN, (0, 1), np.exp(dn))
    fd_lin = (cache.gram(kp, "x", X) - cache.gram(km, "x", X)) / (2 * h)
    fd = (gram(kp, X) - gram(km, X)) / (2 * h)
    assert cache.linearized == 2
    np.testing.assert_allclose(fd_lin, fd, atol=1e-5)
