"""Comparison methods.

* ``bagg-gp``: the aggregated GP (bag targets are noisy means of the field),
  obtained from the deconditional posterior with a Kronecker-delta kernel
  on bag indices, the shrinkage estimator and a vanishing regulariser.
* GP regression on bag centroids.
* Pseudo-targets for indirectly matched data: a GP regression fitted on the
  aggregate set and evaluated at the bag covariates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._optim import FD_STEP, adam_ascent, fd_gradient, safe_eval
from .datasets import AggregateDataset, BagDataset
from .embeddings import SHRINKAGE
from .errors import DimensionMismatch, EmptyDataset, UnmatchedData
from .kernels import DELTA, GramCache, KernelSpec, cached_gram, gram
from .numerics import PsdFactor, chol_psd, half_solve, logdet_psd, solve_psd
from .posterior import MIN_NOISE, DeconditionalModel, check_noise, fit_exact

BAGG_LAMBDA = 1e-10
_LOG2PI = math.log(2.0 * math.pi)
INDEX_KERNEL = KernelSpec.single(DELTA, [0])


def index_datasets(bags: BagDataset, targets) -> tuple[BagDataset, AggregateDataset]:
    """Replace bag covariates by bag indices so that bag ``j`` pairs with target ``j``."""
    z = np.asarray(targets, dtype=float).ravel()
    if z.size != bags.n_bags:
        raise UnmatchedData(f"{bags.n_bags} bags but {z.size} aggregate targets")
    idx = np.arange(bags.n_bags, dtype=float)[:, None]
    return bags.with_covariates(idx), AggregateDataset(idx, z)


def fit_bagg_gp(
    bags: BagDataset,
    targets,
    k_spec: KernelSpec,
    agg_noise_sd: float,
    prior_mean: float = 0.0,
    cache: GramCache | None = None,
) -> DeconditionalModel:
    """Aggregated-GP posterior for bags matched 1:1 with their targets.

    ``targets`` is an :class:`AggregateDataset` (only its targets are used)
    or a plain vector.
    """
    z = targets.targets if isinstance(targets, AggregateDataset) else targets
    d1, d2 = index_datasets(bags, z)
    return fit_exact(d1, d2, k_spec, INDEX_KERNEL, lam=BAGG_LAMBDA, agg_noise_sd=agg_noise_sd,
                     hr_noise_sd=0.0, mode=SHRINKAGE, prior_mean=prior_mean, cache=cache)


# ------------------------------------------------------- GP regression
@dataclass(frozen=True, eq=False)
class GprModel:
    k_spec: KernelSpec
    X: np.ndarray
    y: np.ndarray
    noise_sd: float
    prior_mean: float
    factor: PsdFactor
    alpha: np.ndarray
    history: tuple = ()


def fit_gpr(X, y, k_spec: KernelSpec, noise_sd: float, prior_mean: float = 0.0,
            cache: GramCache | None = None) -> GprModel:
    """Textbook GP regression ``y = f(X) + noise``."""
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise DimensionMismatch(f"{X.shape[0]} inputs for {y.size} targets")
    if y.size == 0:
        raise EmptyDataset("GP regression needs at least one observation")
    check_noise(noise_sd, 0.0)
    K = cached_gram(cache, k_spec, "train", X)
    K[np.diag_indices(y.size)] += noise_sd**2
    F = chol_psd(K, overwrite=True)
    return GprModel(k_spec, X, y, float(noise_sd), float(prior_mean), F, solve_psd(F, y - prior_mean))


def gpr_mean(model: GprModel, X_star) -> np.ndarray:
    return model.prior_mean + gram(model.k_spec, X_star, model.X) @ model.alpha


def gpr_var(model: GprModel, X_star) -> np.ndarray:
    X = np.asarray(X_star, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    out = np.empty(X.shape[0])
    for i in range(0, X.shape[0], 2048):
        rows = slice(i, i + 2048)
        V = half_solve(model.factor, gram(model.k_spec, model.X, X[rows]))
        out[rows] = model.k_spec.diag(V.shape[1]) - np.sum(V**2, axis=0)
    return np.maximum(out, 0.0)


def gpr_lml(model: GprModel) -> float:
    r = model.y - model.prior_mean
    return float(-0.5 * r @ model.alpha - 0.5 * logdet_psd(model.factor) - 0.5 * r.size * _LOG2PI)


def train_gpr(model: GprModel, steps: int, learning_rate: float = 0.05,
              train_mean: bool = True, fd_step: float = FD_STEP) -> GprModel:
    """Adam ascent of the GP-regression log marginal likelihood (FD gradients)."""
    if steps == 0:
        return model
    nk = model.k_spec.n_params
    cache = GramCache(linear_step=fd_step)

    def unpack(theta):
        k = model.k_spec.with_log_params(theta[:nk])
        sigma = max(math.exp(theta[nk]), MIN_NOISE)
        m = float(theta[nk + 1]) if train_mean else model.prior_mean
        return k, sigma, m

    def objective(theta):
        k, sigma, m = unpack(theta)
        return gpr_lml(fit_gpr(model.X, model.y, k, sigma, m, cache))

    def value_and_grad(theta):
        return safe_eval(objective, theta), fd_gradient(objective, theta, fd_step)

    theta0 = np.concatenate([model.k_spec.log_params(), [math.log(model.noise_sd)]]
                            + ([[model.prior_mean]] if train_mean else []))
    res = adam_ascent(value_and_grad, theta0, steps, learning_rate, value_fn=objective)
    k, sigma, m = unpack(res.theta)
    return replace(fit_gpr(model.X, model.y, k, sigma, m), history=tuple(res.history))


def fit_gpr_centroid(bags: BagDataset, targets, k_spec: KernelSpec, noise_sd: float,
                     prior_mean: float = 0.0) -> GprModel:
    """GP regression from bag centroids to bag targets."""
    z = targets.targets if isinstance(targets, AggregateDataset) else np.asarray(targets, dtype=float)
    if z.size != bags.n_bags:
        raise UnmatchedData(f"{bags.n_bags} bags but {z.size} aggregate targets")
    return fit_gpr(bags.centroids(), z, k_spec, noise_sd, prior_mean)


# ------------------------------------------------------- pseudo-targets
@dataclass(frozen=True, eq=False)
class PseudoTargetSet:
    bag_covariates: np.ndarray
    pseudo_targets: np.ndarray
    mediator_noise_sd: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.pseudo_targets)):
            raise ValueError("pseudo targets must be finite")


def make_pseudo_targets(bag_covariates, d2: AggregateDataset, l_spec: KernelSpec,
                        sigma_g: float, prior_mean: float = 0.0) -> PseudoTargetSet:
    """Posterior mean at the bag covariates of a GP regression fitted on ``d2``.

    Only the bag covariates of the bag set and the aggregate set are read.
    """
    if d2.size == 0:
        raise EmptyDataset("pseudo targets need a nonempty aggregate set")
    Y = np.asarray(bag_covariates, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    g = fit_gpr(d2.covariates, d2.targets, l_spec, sigma_g, prior_mean)
    return PseudoTargetSet(Y.copy(), gpr_mean(g, Y), float(sigma_g))
