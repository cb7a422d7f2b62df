"""Exact deconditional posterior of a latent field observed through aggregates.

With prior ``f ~ GP(m, k)`` and targets ``z~ = E[f(X) | Y = y~] + noise``,
the targets are jointly Gaussian with ``f`` and

    mean(x)   = m + Upsilon(x) (Q + sigma^2 I)^{-1} (z~ - m)
    cov(x, x') = k(x, x') - Upsilon(x) (Q + sigma^2 I)^{-1} Upsilon(x')^T

where ``Q`` is the empirical conditional-mean-process covariance at the
targets and ``Upsilon`` the cross-covariance (see :mod:`.embeddings`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._optim import FD_STEP, adam_ascent, fd_gradient, safe_eval
from .datasets import AggregateDataset, BagDataset
from .embeddings import (
    DEFAULT_LAMBDA,
    SHRINKAGE,
    CmoRep,
    MediationOperator,
    build_cmo,
    check_mode,
    cmp_cov,
    cross_cov,
    mediation,
)
from .errors import DegenerateNoise, DimensionMismatch, NegativeNoise
from .kernels import GramCache, KernelSpec, gram
from .numerics import DEFAULT_JITTER, PsdFactor, chol_psd, half_solve, logdet_psd, solve_psd

log = logging.getLogger(__name__)

MIN_NOISE = 1e-6
COV_BLOCK = 512
CLAMP_TOL = 1e-8
_LOG2PI = math.log(2.0 * math.pi)


def check_noise(agg_noise_sd: float, hr_noise_sd: float) -> None:
    if agg_noise_sd < 0 or hr_noise_sd < 0:
        raise NegativeNoise(f"noise levels must be nonnegative, got {agg_noise_sd}, {hr_noise_sd}")
    if max(agg_noise_sd, hr_noise_sd) < MIN_NOISE:
        raise DegenerateNoise(
            "aggregate and high-resolution noise are both zero; the target covariance is degenerate"
        )


@dataclass(frozen=True, eq=False)
class DeconditionalModel:
    k_spec: KernelSpec
    l_spec: KernelSpec
    prior_mean: float
    lam: float
    agg_noise_sd: float
    hr_noise_sd: float
    mode: str
    cmo: CmoRep
    A: MediationOperator
    Q: np.ndarray
    q_factor: PsdFactor
    alpha: np.ndarray
    d1: BagDataset
    d2: AggregateDataset
    history: tuple = field(default=())

    @property
    def n_targets(self) -> int:
        return self.d2.size

    @property
    def residual(self) -> np.ndarray:
        return self.d2.targets - self.prior_mean


def fit_exact(
    d1: BagDataset,
    d2: AggregateDataset,
    k_spec: KernelSpec,
    l_spec: KernelSpec,
    lam: float = DEFAULT_LAMBDA,
    agg_noise_sd: float = 0.1,
    hr_noise_sd: float = 0.0,
    mode: str = SHRINKAGE,
    prior_mean: float = 0.0,
    jitter_schedule=DEFAULT_JITTER,
    cache: GramCache | None = None,
    grouped: bool = True,
) -> DeconditionalModel:
    """Condition the prior on the aggregate targets of ``d2``.

    The replicated estimator is represented through bag-level matrices
    unless ``grouped=False`` (identical values, point-level cost).

    Raises
    ------
    DegenerateNoise
        If both noise levels are below ``1e-6``.
    """
    check_noise(agg_noise_sd, hr_noise_sd)
    mode = check_mode(mode)
    if d2.size and d2.dim_y != d1.dim_y:
        raise DimensionMismatch(f"bag covariates have {d1.dim_y} columns, targets have {d2.dim_y}")
    cmo = build_cmo(d1, k_spec, l_spec, lam, mode, jitter_schedule, cache=cache, grouped=grouped)
    A = mediation(cmo, d2.covariates, cache=cache)
    Q = cmp_cov(cmo, A, hr_noise_sd, cache=cache)
    S = Q.copy()
    S[np.diag_indices(A.n_cols)] += agg_noise_sd**2
    factor = chol_psd(S, jitter_schedule, overwrite=True)
    r = d2.targets - prior_mean
    alpha = solve_psd(factor, r)
    return DeconditionalModel(
        k_spec, l_spec, float(prior_mean), float(lam), float(agg_noise_sd), float(hr_noise_sd),
        mode, cmo, A, Q, factor, alpha, d1, d2,
    )


def _as_queries(model: DeconditionalModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != model.d1.dim_x:
        raise DimensionMismatch(f"queries have {X.shape[1]} columns, data have {model.d1.dim_x}")
    return X


def posterior_mean(model: DeconditionalModel, X_star) -> np.ndarray:
    X = _as_queries(model, X_star)
    if model.n_targets == 0:
        return np.full(X.shape[0], model.prior_mean)
    return model.prior_mean + cross_cov(model.cmo, model.A, X) @ model.alpha


def _clamp_diagonal(var: np.ndarray) -> np.ndarray:
    low = var.min(initial=0.0)
    if low < -CLAMP_TOL:
        log.warning("clamped %d negative posterior variances (min %.3e)", int(np.sum(var < -CLAMP_TOL)), low)
    return np.maximum(var, 0.0)


def posterior_cov(model: DeconditionalModel, X_star, X_star2=None) -> np.ndarray:
    """Posterior covariance; with one argument the diagonal is clamped at zero."""
    X = _as_queries(model, X_star)
    same = X_star2 is None
    X2 = X if same else _as_queries(model, X_star2)
    out = np.empty((X.shape[0], X2.shape[0]))
    if model.n_targets:
        V2 = half_solve(model.q_factor, cross_cov(model.cmo, model.A, X2).T)
    for i in range(0, X.shape[0], COV_BLOCK):
        rows = slice(i, i + COV_BLOCK)
        blk = gram(model.k_spec, X[rows], X2)
        if model.n_targets:
            V1 = half_solve(model.q_factor, cross_cov(model.cmo, model.A, X[rows]).T)
            blk -= V1.T @ V2
        out[rows] = blk
    if same:
        out = 0.5 * (out + out.T)
        d = np.diag_indices(X.shape[0])
        out[d] = _clamp_diagonal(out[d])
    return out


def posterior_var(model: DeconditionalModel, X_star) -> np.ndarray:
    """Diagonal of :func:`posterior_cov`, without forming the full matrix."""
    X = _as_queries(model, X_star)
    prior = np.concatenate(
        [np.diagonal(gram(model.k_spec, X[i : i + COV_BLOCK])) for i in range(0, X.shape[0], COV_BLOCK)]
    ) if X.shape[0] else np.zeros(0)
    if model.n_targets == 0:
        return prior
    var = np.empty(X.shape[0])
    for i in range(0, X.shape[0], COV_BLOCK):
        rows = slice(i, i + COV_BLOCK)
        V = half_solve(model.q_factor, cross_cov(model.cmo, model.A, X[rows]).T)
        var[rows] = prior[rows] - np.sum(V**2, axis=0)
    return _clamp_diagonal(var)


def log_marginal_likelihood(model: DeconditionalModel) -> float:
    """``log N(z~; m, Q + sigma^2 I)``."""
    M = model.n_targets
    if M == 0:
        return 0.0
    r = model.residual
    return float(-0.5 * r @ model.alpha - 0.5 * logdet_psd(model.q_factor) - 0.5 * M * _LOG2PI)


# -------------------------------------------------------------- training
@dataclass(frozen=True)
class _Packing:
    """Layout of the unconstrained training vector."""

    n_k: int
    n_l: int
    train_sigma: bool
    train_varsigma: bool
    train_mean: bool

    def pack(self, model: DeconditionalModel) -> np.ndarray:
        parts = [model.k_spec.log_params(), model.l_spec.log_params()]
        if self.train_sigma:
            parts.append([math.log(model.agg_noise_sd)])
        if self.train_varsigma:
            parts.append([math.log(model.hr_noise_sd)])
        if self.train_mean:
            parts.append([model.prior_mean])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def unpack(self, model: DeconditionalModel, theta: np.ndarray) -> dict:
        i = 0
        k = model.k_spec.with_log_params(theta[i : i + self.n_k])
        i += self.n_k
        l = model.l_spec.with_log_params(theta[i : i + self.n_l])
        i += self.n_l
        sigma, varsigma, m = model.agg_noise_sd, model.hr_noise_sd, model.prior_mean
        if self.train_sigma:
            sigma = max(math.exp(theta[i]), MIN_NOISE)
            i += 1
        if self.train_varsigma:
            varsigma = max(math.exp(theta[i]), MIN_NOISE)
            i += 1
        if self.train_mean:
            m = float(theta[i])
        return dict(k_spec=k, l_spec=l, agg_noise_sd=sigma, hr_noise_sd=varsigma, prior_mean=m)


def train_exact(
    model: DeconditionalModel,
    steps: int,
    learning_rate: float = 0.05,
    seed: int = 0,
    fd_step: float = FD_STEP,
    train_mean: bool = True,
    train_data: BagDataset | None = None,
) -> DeconditionalModel:
    """Maximise the log marginal likelihood with Adam and FD gradients.

    Trainable coordinates are the log kernel hyperparameters of both
    kernels, ``log sigma`` and ``log varsigma`` (each only when positive)
    and, if ``train_mean``, the constant prior mean. ``train_data`` replaces
    the bags during training only (e.g. a per-bag subsample); the returned
    model is refitted on the model's own bags. ``seed`` is accepted for
    interface symmetry; the procedure is deterministic.
    """
    del seed
    pk = _Packing(
        model.k_spec.n_params,
        model.l_spec.n_params,
        model.agg_noise_sd > 0,
        model.hr_noise_sd > 0,
        train_mean,
    )
    bags = model.d1 if train_data is None else train_data
    cache = GramCache(linear_step=fd_step)

    def objective(theta):
        kw = pk.unpack(model, theta)
        fitted = fit_exact(bags, model.d2, lam=model.lam, mode=model.mode, cache=cache, **kw)
        return log_marginal_likelihood(fitted)

    def value_and_grad(theta):
        return safe_eval(objective, theta), fd_gradient(objective, theta, fd_step)

    theta0 = pk.pack(model)
    if steps == 0:
        return model
    res = adam_ascent(value_and_grad, theta0, steps, learning_rate, value_fn=objective)
    kw = pk.unpack(model, res.theta)
    out = fit_exact(model.d1, model.d2, lam=model.lam, mode=model.mode, **kw)
    return replace(out, history=tuple(res.history))


def refit(model: DeconditionalModel, **changes) -> DeconditionalModel:
    """Refit ``model`` with some constructor arguments replaced."""
    kw = dict(
        d1=model.d1, d2=model.d2, k_spec=model.k_spec, l_spec=model.l_spec, lam=model.lam,
        agg_noise_sd=model.agg_noise_sd, hr_noise_sd=model.hr_noise_sd, mode=model.mode,
        prior_mean=model.prior_mean,
    )
    kw.update(changes)
    return fit_exact(**kw)
