"""Sparse variational deconditional posterior.

Inducing values ``u = f(w) ~ N(0, K_ww)`` carry a Gaussian variational
distribution ``q(u) = N(eta, Sigma)`` with ``Sigma = L L^T``. The implied
``q(f)`` has moments

    eta_bar   = K_xw K_ww^{-1} eta
    Sigma_bar = K_xx - K_xw (K_ww^{-1} - K_ww^{-1} Sigma K_ww^{-1}) K_wx

and the aggregate targets are modelled as ``z~ = A~^T (f + varsigma e) + sigma e'``
where ``A~`` is the point-level mediation operator. All the bag data enter
the bound through three small matrices: ``Q = A~^T K A~``, ``B = K_wx A~``
and ``A~^T A~``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.cluster import kmeans_plusplus

from ._optim import FD_STEP, Adam, adam_ascent, safe_eval
from .datasets import AggregateDataset, BagDataset
from .embeddings import (
    DEFAULT_LAMBDA,
    SHRINKAGE,
    build_cmo,
    check_mode,
    cmp_cov,
    col_bag_mean,
    mediation,
)
from .errors import DimensionMismatch, NonFiniteObjective, TooManyInducing
from .kernels import GramCache, KernelSpec, cached_gram, gram, rff_gram
from .numerics import DEFAULT_JITTER, PsdFactor, chol_psd, half_solve, logdet_psd, solve_psd
from .posterior import MIN_NOISE, check_noise

log = logging.getLogger(__name__)

LLOYD_ITERATIONS = 10
_LOG2PI = math.log(2.0 * math.pi)
_BLOCK = 2048


# ------------------------------------------------------------ inducing
def init_inducing_kmeanspp(X, n_inducing: int, seed: int) -> np.ndarray:
    """k-means++ seeding followed by ten Lloyd iterations.

    Clusters that lose all their points keep their previous centre.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if n_inducing < 1:
        raise ValueError("n_inducing must be >= 1")
    if n_inducing > X.shape[0]:
        raise TooManyInducing(f"{n_inducing} inducing points requested for {X.shape[0]} inputs")
    centres, _ = kmeans_plusplus(X, n_inducing, random_state=seed)
    centres = centres.astype(float)
    for _ in range(LLOYD_ITERATIONS):
        d2 = ((X**2).sum(1)[:, None] - 2.0 * X @ centres.T + (centres**2).sum(1)[None, :])
        owner = np.argmin(d2, axis=1)
        counts = np.bincount(owner, minlength=n_inducing)
        sums = np.zeros_like(centres)
        np.add.at(sums, owner, X)
        moved = counts > 0
        new = centres.copy()
        new[moved] = sums[moved] / counts[moved, None]
        if np.array_equal(new, centres):
            break
        centres = new
    return centres


# --------------------------------------------------------------- state
@dataclass(frozen=True, eq=False)
class VariationalState:
    inducing: np.ndarray  # (d, d_x)
    var_mean: np.ndarray  # (d,)
    var_chol: np.ndarray  # (d, d) lower triangular, positive diagonal
    k_spec: KernelSpec
    l_spec: KernelSpec
    lam: float
    agg_noise_sd: float
    hr_noise_sd: float
    mode: str = SHRINKAGE
    optimizer: Adam | None = None
    curve: tuple = field(default=())  # (step, elbo, sigma, varsigma)

    def __post_init__(self):
        d = self.inducing.shape[0]
        if self.var_mean.shape != (d,) or self.var_chol.shape != (d, d):
            raise DimensionMismatch("variational parameters do not match the inducing count")
        if np.any(np.triu(self.var_chol, 1) != 0):
            raise ValueError("var_chol must be lower triangular")
        if np.any(np.diagonal(self.var_chol) <= 0):
            raise ValueError("var_chol must have a positive diagonal")

    @property
    def n_inducing(self) -> int:
        return int(self.inducing.shape[0])

    @property
    def var_cov(self) -> np.ndarray:
        return self.var_chol @ self.var_chol.T


def prior_state(
    inducing,
    k_spec: KernelSpec,
    l_spec: KernelSpec,
    lam: float = DEFAULT_LAMBDA,
    agg_noise_sd: float = 0.1,
    hr_noise_sd: float = 0.0,
    mode: str = SHRINKAGE,
) -> VariationalState:
    """State with ``q(u)`` equal to the prior ``N(0, K_ww)``."""
    w = np.atleast_2d(np.asarray(inducing, dtype=float))
    chol = chol_psd(gram(k_spec, w)).lower_factor
    return VariationalState(w, np.zeros(w.shape[0]), np.array(chol), k_spec, l_spec, float(lam),
                            float(agg_noise_sd), float(hr_noise_sd), check_mode(mode))


def init_state(
    d1: BagDataset,
    k_spec: KernelSpec,
    l_spec: KernelSpec,
    n_inducing: int,
    seed: int,
    lam: float = DEFAULT_LAMBDA,
    agg_noise_sd: float = 0.1,
    hr_noise_sd: float = 0.0,
    mode: str = SHRINKAGE,
) -> VariationalState:
    w = init_inducing_kmeanspp(d1.points, n_inducing, seed)
    return prior_state(w, k_spec, l_spec, lam, agg_noise_sd, hr_noise_sd, mode)


# -------------------------------------------------------- q(f) and KL
def _kww_factor(k_spec: KernelSpec, w: np.ndarray, cache=None, tag="kww") -> PsdFactor:
    return chol_psd(cached_gram(cache, k_spec, tag, w), DEFAULT_JITTER)


def _cross_w(state: VariationalState, X, rff=None) -> np.ndarray:
    if rff:
        out = np.zeros((X.shape[0], state.n_inducing))
        for ti, term in enumerate(state.k_spec.terms):
            if ti in rff:
                out += rff_gram(rff[ti], X, state.inducing)
            else:
                sub = KernelSpec((term,))
                out += gram(sub, X, state.inducing)
        return out
    return gram(state.k_spec, X, state.inducing)


def q_f_moments(state: VariationalState, X_star) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and full covariance of ``q(f)`` at ``X_star``."""
    X = np.atleast_2d(np.asarray(X_star, dtype=float))
    F = _kww_factor(state.k_spec, state.inducing)
    Kxw = gram(state.k_spec, X, state.inducing)
    P = solve_psd(F, Kxw.T)  # K_ww^{-1} K_wx
    mean = P.T @ state.var_mean
    V = half_solve(F, Kxw.T)
    LtP = state.var_chol.T @ P
    cov = gram(state.k_spec, X) - V.T @ V + LtP.T @ LtP
    return mean, 0.5 * (cov + cov.T)


def q_f_mean_var(state: VariationalState, X_star, rff=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and marginal variance of ``q(f)``, blockwise over queries.

    ``rff`` optionally maps kernel term indices to random Fourier feature
    maps used for the query-to-inducing kernel evaluations.
    """
    X = np.asarray(X_star, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    if X.shape[1] != state.inducing.shape[1]:
        raise DimensionMismatch(f"queries have {X.shape[1]} columns, inducing points have {state.inducing.shape[1]}")
    F = _kww_factor(state.k_spec, state.inducing)
    kdiag = state.k_spec.diag(X.shape[0])
    mean = np.empty(X.shape[0])
    var = np.empty(X.shape[0])
    for i in range(0, X.shape[0], _BLOCK):
        rows = slice(i, i + _BLOCK)
        Kxw = _cross_w(state, X[rows], rff)
        P = solve_psd(F, Kxw.T)
        V = half_solve(F, Kxw.T)
        mean[rows] = P.T @ state.var_mean
        var[rows] = kdiag[rows] - np.sum(V**2, axis=0) + np.sum((state.var_chol.T @ P) ** 2, axis=0)
    return mean, np.maximum(var, 0.0)


def _kl(F: PsdFactor, eta: np.ndarray, chol: np.ndarray) -> float:
    d = eta.size
    W = half_solve(F, chol)
    v = half_solve(F, eta)
    tr = float(np.sum(W**2))
    quad = float(v @ v)
    logdet_sigma = 2.0 * float(np.sum(np.log(np.diagonal(chol))))
    return 0.5 * (tr + quad - d + logdet_psd(F) - logdet_sigma)


def kl_term(state: VariationalState) -> float:
    """``KL(q(u) || p(u))`` in closed form."""
    F = _kww_factor(state.k_spec, state.inducing)
    return _kl(F, state.var_mean, state.var_chol)


# ---------------------------------------------------------------- ELBO
class DataTerms(NamedTuple):
    Q: np.ndarray  # A~^T K A~  (M x M)
    B: np.ndarray  # K_wx A~    (d x M)
    AtA: np.ndarray  # A~^T A~  (M x M)
    Kww: PsdFactor


def data_terms(
    k_spec: KernelSpec,
    l_spec: KernelSpec,
    lam: float,
    mode: str,
    inducing: np.ndarray,
    d1: BagDataset,
    d2: AggregateDataset,
    cache: GramCache | None = None,
    w_cache: GramCache | None = None,
    grouped: bool = True,
) -> DataTerms:
    """Bag-data summaries entering the bound for one hyperparameter setting.

    ``grouped=False`` forms the replicated operator at point level (same
    values, quadratic memory in the point count).
    """
    cmo = build_cmo(d1, k_spec, l_spec, lam, mode, cache=cache, grouped=grouped)
    A = mediation(cmo, d2.covariates, cache=cache)
    Q = cmp_cov(cmo, A, 0.0, cache=cache)
    a = A.matrix
    if not cmo.bag_level:
        Kwx = cached_gram(w_cache, k_spec, "kwx", inducing, d1.points)
        AtA = a.T @ a
    else:
        sizes = d1.sizes
        Kwx = cached_gram(w_cache, k_spec, "kwbar", inducing, d1.points,
                          reducer=lambda G: col_bag_mean(G, sizes))
        AtA = a.T @ (a / sizes[:, None])
    return DataTerms(Q, Kwx @ a, 0.5 * (AtA + AtA.T), _kww_factor(k_spec, inducing, w_cache))


def _bound(terms: DataTerms, z: np.ndarray, eta, chol, sigma, varsigma, grads: bool = False):
    """ELBO from data summaries; optionally its gradients in ``eta`` and ``chol``."""
    M = z.size
    F = terms.Kww
    C = solve_psd(F, terms.B)  # K_ww^{-1} B
    r = z - C.T @ eta
    LtC = chol.T @ C
    kl = _kl(F, eta, chol)
    if varsigma == 0.0:
        s2 = sigma**2
        # tr(A^T Sigma_bar A) = tr Q - tr(B^T K^-1 B) + ||L^T C||^2
        tr_sig = np.trace(terms.Q) - float(np.sum(half_solve(F, terms.B) ** 2)) + float(np.sum(LtC**2))
        val = -0.5 * M * (_LOG2PI + math.log(s2)) - (tr_sig + float(r @ r)) / (2.0 * s2) - kl
        Sinv_r = r / s2
        CSC = (C @ C.T) / s2
    else:
        S = varsigma**2 * terms.AtA
        S[np.diag_indices(M)] += sigma**2
        SF = chol_psd(S)
        Sinv_r = solve_psd(SF, r)
        T = terms.Q - terms.B.T @ C + LtC.T @ LtC
        T = 0.5 * (T + T.T)
        # tr(S^-1 T) as a factorised quadratic form
        W = half_solve(SF, T)
        tr_sig = float(np.trace(half_solve(SF, W.T)))
        val = -0.5 * M * _LOG2PI - 0.5 * logdet_psd(SF) - 0.5 * float(r @ Sinv_r) - 0.5 * tr_sig - kl
        CSC = C @ solve_psd(SF, C.T) if grads else None
    if not grads:
        return float(val)
    Kinv_eta = solve_psd(F, eta)
    g_eta = C @ Sinv_r - Kinv_eta
    g_chol = -CSC @ chol - solve_psd(F, chol) + np.diag(1.0 / np.diagonal(chol))
    return float(val), g_eta, np.tril(g_chol)


def optimal_q(terms: DataTerms, z: np.ndarray, sigma: float, varsigma: float):
    """Maximiser ``(eta, chol)`` of the bound for fixed hyperparameters.

    The bound is a Gaussian linear model ``z~ = C^T u + e`` with
    ``e ~ N(0, S)``, ``S = varsigma^2 A~^T A~ + sigma^2 I`` and
    ``C = K_ww^{-1} B``, penalised by terms free of ``q``; its maximiser is
    the exact posterior of ``u``:

        Sigma = K_ww - B G^{-1} B^T,   eta = B G^{-1} z~,   G = S + B^T K_ww^{-1} B.
    """
    M = z.size
    F = terms.Kww
    E = half_solve(F, terms.B)
    G = varsigma**2 * terms.AtA + E.T @ E
    G[np.diag_indices(M)] += sigma**2
    GF = chol_psd(0.5 * (G + G.T), overwrite=True)
    eta = terms.B @ solve_psd(GF, z)
    V = half_solve(GF, terms.B.T)
    Kww = F.lower_factor @ F.lower_factor.T
    Sigma = Kww - V.T @ V
    chol = chol_psd(0.5 * (Sigma + Sigma.T), overwrite=True).lower_factor
    return eta, np.array(chol)


def with_optimal_q(state: VariationalState, d1: BagDataset, d2: AggregateDataset,
                   cache: GramCache | None = None) -> VariationalState:
    """``state`` with ``q(u)`` replaced by the maximiser of the bound."""
    check_noise(state.agg_noise_sd, state.hr_noise_sd)
    if d2.size == 0:
        return prior_state(state.inducing, state.k_spec, state.l_spec, state.lam,
                           state.agg_noise_sd, state.hr_noise_sd, state.mode)
    terms = _terms_for_state(state, d1, d2, cache, cache)
    eta, chol = optimal_q(terms, d2.targets, state.agg_noise_sd, state.hr_noise_sd)
    return replace(state, var_mean=eta, var_chol=chol)


def _terms_for_state(state, d1, d2, cache=None, w_cache=None) -> DataTerms:
    return data_terms(state.k_spec, state.l_spec, state.lam, state.mode, state.inducing, d1, d2,
                      cache, w_cache)


def elbo(state: VariationalState, d1: BagDataset, d2: AggregateDataset,
         cache: GramCache | None = None) -> float:
    """Evidence lower bound on ``log p(z~)``."""
    check_noise(state.agg_noise_sd, state.hr_noise_sd)
    if d2.size == 0:
        return -kl_term(state)
    terms = _terms_for_state(state, d1, d2, cache, cache)
    return _bound(terms, d2.targets, state.var_mean, state.var_chol,
                  state.agg_noise_sd, state.hr_noise_sd)


def elbo_with_grad(state: VariationalState, d1: BagDataset, d2: AggregateDataset):
    """ELBO and its closed-form gradients in ``var_mean`` and ``var_chol``."""
    check_noise(state.agg_noise_sd, state.hr_noise_sd)
    terms = _terms_for_state(state, d1, d2)
    return _bound(terms, d2.targets, state.var_mean, state.var_chol,
                  state.agg_noise_sd, state.hr_noise_sd, grads=True)


# ------------------------------------------------------------ training
CURVE_COLUMNS = ("step", "elbo", "sigma", "varsigma")


def write_curve_csv(path, curve) -> None:
    """Training curve rows ``(step, elbo, sigma, varsigma)`` as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, quoting=csv.QUOTE_NONE, lineterminator="\n")
        wr.writerow(CURVE_COLUMNS)
        for step, val, sigma, varsigma in curve:
            wr.writerow([str(int(step))] + [format(float(v), ".17g") for v in (val, sigma, varsigma)])


@dataclass(frozen=True)
class _Layout:
    d: int
    d_x: int
    n_k: int
    n_l: int
    train_sigma: bool
    train_varsigma: bool
    train_inducing: bool

    @property
    def n_var(self) -> int:
        return self.d + self.d * (self.d + 1) // 2

    @property
    def hyper_slice(self) -> slice:
        n = self.n_k + self.n_l + self.train_sigma + self.train_varsigma
        return slice(self.n_var, self.n_var + n)

    @property
    def inducing_slice(self) -> slice:
        start = self.hyper_slice.stop
        return slice(start, start + (self.d * self.d_x if self.train_inducing else 0))

    def pack(self, s: VariationalState) -> np.ndarray:
        rows, cols = np.tril_indices(self.d)
        tri = s.var_chol[rows, cols].copy()
        diag = rows == cols
        tri[diag] = np.log(tri[diag])
        parts = [s.var_mean, tri, s.k_spec.log_params(), s.l_spec.log_params()]
        if self.train_sigma:
            parts.append([math.log(s.agg_noise_sd)])
        if self.train_varsigma:
            parts.append([math.log(s.hr_noise_sd)])
        if self.train_inducing:
            parts.append(s.inducing.ravel())
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def unpack_var(self, theta):
        d = self.d
        eta = theta[:d]
        rows, cols = np.tril_indices(d)
        tri = theta[d : self.n_var].copy()
        diag = rows == cols
        tri[diag] = np.exp(tri[diag])
        chol = np.zeros((d, d))
        chol[rows, cols] = tri
        return eta, chol

    def unpack_hyper(self, s: VariationalState, theta):
        h = theta[self.hyper_slice]
        k = s.k_spec.with_log_params(h[: self.n_k])
        l = s.l_spec.with_log_params(h[self.n_k : self.n_k + self.n_l])
        i = self.n_k + self.n_l
        sigma, varsigma = s.agg_noise_sd, s.hr_noise_sd
        if self.train_sigma:
            sigma = max(math.exp(h[i]), MIN_NOISE)
            i += 1
        if self.train_varsigma:
            varsigma = max(math.exp(h[i]), MIN_NOISE)
        w = theta[self.inducing_slice].reshape(self.d, self.d_x) if self.train_inducing else s.inducing
        return k, l, sigma, varsigma, w

    def var_grad_to_theta(self, g_eta, g_chol, chol):
        rows, cols = np.tril_indices(self.d)
        g_tri = g_chol[rows, cols].copy()
        diag = rows == cols
        g_tri[diag] *= chol[rows[diag], cols[diag]]  # d/d log L_ii
        return np.concatenate([g_eta, g_tri])

    def to_state(self, s: VariationalState, theta, **extra) -> VariationalState:
        eta, chol = self.unpack_var(theta)
        k, l, sigma, varsigma, w = self.unpack_hyper(s, theta)
        return replace(s, inducing=np.array(w), var_mean=np.array(eta), var_chol=chol, k_spec=k,
                       l_spec=l, agg_noise_sd=sigma, hr_noise_sd=varsigma, **extra)


def train_variational(
    state: VariationalState,
    d1: BagDataset,
    d2: AggregateDataset,
    steps: int,
    learning_rate: float = 0.05,
    seed: int = 0,
    train_inducing: bool = False,
    train_hyper: bool = True,
    fd_step: float = FD_STEP,
    whiten: bool = True,
) -> VariationalState:
    """Adam ascent of the ELBO; returns the best state seen.

    With ``whiten`` the variational parameters are trained in coordinates
    ``eta = L m`` and ``var_chol = L L_s`` with ``L`` the Cholesky factor
    of ``K_ww``, so that ``q(u)`` follows kernel changes; otherwise
    ``m = eta`` and ``L_s = var_chol`` directly. ``m`` and ``L_s``
    (with a log diagonal) use the closed-form gradient of the bound. Kernel
    hyperparameters, ``log sigma``, ``log varsigma`` (each when positive)
    and optionally the inducing locations use central finite differences
    with step ``fd_step``. ``seed`` is accepted for interface symmetry.
    """
    del seed
    if steps == 0:
        return state
    check_noise(state.agg_noise_sd, state.hr_noise_sd)
    lay = _Layout(
        state.n_inducing, state.inducing.shape[1], state.k_spec.n_params, state.l_spec.n_params,
        train_sigma=state.agg_noise_sd > 0, train_varsigma=state.hr_noise_sd > 0,
        train_inducing=train_inducing,
    )
    cache = GramCache(linear_step=fd_step)
    w_cache = None if train_inducing else GramCache()
    z = d2.targets
    fd_idx = list(range(lay.hyper_slice.start, lay.hyper_slice.stop)) if train_hyper else []
    if train_inducing:
        fd_idx += list(range(lay.inducing_slice.start, lay.inducing_slice.stop))

    def terms_at(theta):
        k, l, _, _, w = lay.unpack_hyper(state, theta)
        return data_terms(k, l, state.lam, state.mode, w, d1, d2, cache, w_cache)

    def colour(factor: PsdFactor) -> np.ndarray:
        return factor.lower_factor if whiten else np.eye(lay.d)

    def coloured(theta, terms):
        m, Ls = lay.unpack_var(theta)
        Lk = colour(terms.Kww)
        return Lk @ m, Lk @ Ls, Ls

    def value(theta):
        terms = terms_at(theta)
        eta, chol, _ = coloured(theta, terms)
        _, _, sigma, varsigma, _ = lay.unpack_hyper(state, theta)
        return _bound(terms, z, eta, chol, sigma, varsigma)

    def value_and_grad(theta):
        terms = terms_at(theta)
        eta, chol, Ls = coloured(theta, terms)
        _, _, sigma, varsigma, _ = lay.unpack_hyper(state, theta)
        val, g_eta, g_chol = _bound(terms, z, eta, chol, sigma, varsigma, grads=True)
        Lk = colour(terms.Kww)
        grad = np.zeros_like(theta)
        grad[: lay.n_var] = lay.var_grad_to_theta(Lk.T @ g_eta, np.tril(Lk.T @ g_chol), Ls)
        for i in fd_idx:
            e = np.zeros_like(theta)
            e[i] = fd_step
            fp, fm = safe_eval(value, theta + e), safe_eval(value, theta - e)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteObjective(f"ELBO not finite around coordinate {i}")
            grad[i] = (fp - fm) / (2.0 * fd_step)
        return val, grad

    curve: list = list(state.curve)
    offset = (curve[-1][0] + 1) if curve else 0

    def record(step, theta, val):
        _, _, sigma, varsigma, _ = lay.unpack_hyper(state, theta)
        curve.append((offset + step, val, sigma, varsigma))

    Lk0 = colour(_kww_factor(state.k_spec, state.inducing))
    white = replace(state, var_mean=solve_triangular(Lk0, state.var_mean, lower=True),
                    var_chol=np.tril(solve_triangular(Lk0, state.var_chol, lower=True)))
    n_theta = lay.inducing_slice.stop
    opt = state.optimizer if state.optimizer is not None and state.optimizer.dim == n_theta else None
    res = adam_ascent(value_and_grad, lay.pack(white), steps, learning_rate, optimizer=opt,
                      value_fn=value, on_step=record)
    k, _, _, _, w = lay.unpack_hyper(state, res.theta)
    m, Ls = lay.unpack_var(res.theta)
    Lk = colour(_kww_factor(k, w))
    out = lay.to_state(state, res.theta, optimizer=res.optimizer, curve=tuple(curve))
    return replace(out, var_mean=Lk @ m, var_chol=np.tril(Lk @ Ls))
