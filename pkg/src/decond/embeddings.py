"""Empirical conditional mean operators and the quantities built on them.

Two estimators of the conditional mean operator are supported:

``replicated``
    every point of a bag is paired with a copy of the bag covariate, so the
    regularised solve is over all ``N_tot`` points.
``shrinkage``
    bags enter through their empirical kernel means, so the solve is over
    the ``N`` bag covariates only.

From an operator and a set of target covariates we form the mediation
matrix ``A = (L + n lambda I)^{-1} L_{y, y~}`` and, from it, the covariance
of the conditional mean process at the targets and its cross-covariance
with the latent field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import AggregateDataset, BagDataset
from .errors import DimensionMismatch, NegativeNoise, NonPositiveLambda
from .kernels import GramCache, KernelSpec, cached_gram, gram
from .numerics import DEFAULT_JITTER, PsdFactor, chol_psd, solve_psd

REPLICATED = "replicated"
SHRINKAGE = "shrinkage"
MODES = (REPLICATED, SHRINKAGE)

DEFAULT_LAMBDA = 1e-3
# query rows per block when forming |X*| x N_tot kernel matrices
_QUERY_BLOCK = 2048


def check_mode(mode: str) -> str:
    m = str(mode).lower()
    if m not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return m


# ------------------------------------------------------------- bag sums
def _starts(sizes: np.ndarray) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)[:-1]])


def col_bag_mean(G: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Average the columns of ``G`` within each (contiguous) bag."""
    return np.add.reduceat(G, _starts(sizes), axis=1) / sizes


def bag_mean_reducer(sizes: np.ndarray):
    """Map an ``N_tot x N_tot`` point Gram to the ``N x N`` bag-mean Gram."""
    sizes = np.asarray(sizes)
    st = _starts(sizes)

    def reduce(G):
        R = np.add.reduceat(G, st, axis=1) / sizes
        return np.add.reduceat(R, st, axis=0) / sizes[:, None]

    return reduce


def bag_mean_gram(k: KernelSpec, bags: BagDataset, cache: GramCache | None = None) -> np.ndarray:
    """``(1 / n_i n_j) sum_l sum_r k(x_i^l, x_j^r)`` for all bag pairs."""
    M = cached_gram(cache, k, "kbar", bags.points, reducer=bag_mean_reducer(bags.sizes))
    return 0.5 * (M + M.T)


def bag_mean_kernel(k: KernelSpec, bags: BagDataset, X_star) -> np.ndarray:
    """``(1 / n_j) sum_i k(x*, x_j^i)`` as a ``|X*| x N`` matrix."""
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    out = np.empty((X_star.shape[0], bags.n_bags))
    for i in range(0, X_star.shape[0], _QUERY_BLOCK):
        rows = slice(i, i + _QUERY_BLOCK)
        out[rows] = col_bag_mean(gram(k, X_star[rows], bags.points), bags.sizes)
    return out


# ------------------------------------------------------------- operators
@dataclass(frozen=True, eq=False)
class CmoRep:
    """Fitted empirical conditional mean operator.

    ``anchors_y`` are the covariates entering the regularised solve: the
    replicated per-point covariates or the bag covariates. ``factor`` holds
    the Cholesky factor of ``L + n_anchor * lam * I``.

    A grouped replicated operator stores bag-level quantities only. Since
    the replicated covariate Gram is ``P L P^T`` with ``P`` the point-to-bag
    indicator, ``(P L P^T + c I)^{-1} P = P (L D + c I)^{-1}`` with
    ``D = diag(n_j)``; ``factor`` then holds ``D^{1/2} L D^{1/2} + c I`` with
    ``c = N_tot lam`` and ``weights`` is ``D^{1/2}``. Its mediation matrix
    is the bag-level ``D (L D + c I)^{-1} L_{y, y~}``, used exactly like the
    shrinkage one.
    """

    mode: str
    k_spec: KernelSpec
    l_spec: KernelSpec
    anchors: BagDataset
    anchors_y: np.ndarray
    lam: float
    factor: PsdFactor
    bag_mean_gram: np.ndarray | None = None
    weights: np.ndarray | None = None

    @property
    def n_anchor(self) -> int:
        return int(self.anchors_y.shape[0])

    @property
    def grouped(self) -> bool:
        return self.weights is not None

    @property
    def bag_level(self) -> bool:
        """Anchors are bags (shrinkage or grouped replicated)."""
        return self.mode == SHRINKAGE or self.grouped

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Regularised solve against the anchors, in double precision."""
        if self.weights is None:
            return np.asarray(solve_psd(self.factor, rhs), dtype=np.float64)
        w = self.weights[:, None]
        return w * solve_psd(self.factor, w * rhs)


@dataclass(frozen=True, eq=False)
class MediationOperator:
    """``A = (L_yy + N lam I)^{-1} L_{y, y~}``; column ``j`` belongs to ``y~_j``."""

    matrix: np.ndarray
    lam: float
    n_rows: int
    n_cols: int
    mode: str


def build_cmo(
    bags: BagDataset,
    k: KernelSpec,
    l: KernelSpec,
    lam: float = DEFAULT_LAMBDA,
    mode: str = SHRINKAGE,
    jitter_schedule=DEFAULT_JITTER,
    dtype=np.float64,
    cache: GramCache | None = None,
    grouped: bool = False,
    with_bag_gram: bool = True,
) -> CmoRep:
    """Assemble and factor the regularised covariate Gram.

    ``dtype=np.float32`` builds and factors the replicated Gram in single
    precision and in place, for problems whose double-precision Gram does
    not fit in memory. ``grouped=True`` represents the replicated operator
    through bag-level matrices (exactly; see :class:`CmoRep`), which costs
    as little as the shrinkage estimator. ``with_bag_gram=False`` skips the
    ``N_tot x N_tot`` kernel pass behind ``bag_mean_gram``; such operators
    evaluate embeddings but cannot form CMP covariances.
    """
    mode = check_mode(mode)
    if not (np.isfinite(lam) and lam > 0):
        raise NonPositiveLambda(f"lambda must be positive, got {lam}")
    if mode == REPLICATED and grouped:
        Y = bags.covariates
        w = np.sqrt(bags.sizes.astype(float))
        L = cached_gram(cache, l, "lbag", Y) * np.outer(w, w)
        L[np.diag_indices(Y.shape[0])] += bags.total_points * lam
        factor = chol_psd(L, jitter_schedule, overwrite=True)
        Mbar = bag_mean_gram(k, bags, cache) if with_bag_gram else None
        return CmoRep(mode, k, l, bags, Y, float(lam), factor, Mbar, w)
    if mode == REPLICATED:
        Y = bags.replicated_covariates
        if cache is not None and dtype == np.float64:
            L = cached_gram(cache, l, "lrep", Y)
        else:
            L = gram(l, Y, dtype=dtype)
        Mbar = None
    else:
        Y = bags.covariates
        L = cached_gram(cache, l, "lbag", Y)
        Mbar = bag_mean_gram(k, bags, cache) if with_bag_gram else None
    n = Y.shape[0]
    L[np.diag_indices(n)] += L.dtype.type(n * lam)
    factor = chol_psd(L, jitter_schedule, overwrite=True)
    return CmoRep(mode, k, l, bags, Y, float(lam), factor, Mbar)


def _anchor_tag(cmo: CmoRep) -> str:
    return "lbag_t" if cmo.bag_level else "lrep_t"


def mediation(cmo: CmoRep, y_tilde, cache: GramCache | None = None) -> MediationOperator:
    """Mediation matrix from the operator's anchors to target covariates."""
    Yt = np.asarray(y_tilde, dtype=float)
    if Yt.ndim == 1:
        Yt = Yt[:, None]
    if Yt.shape[1] != cmo.anchors_y.shape[1]:
        raise DimensionMismatch(
            f"target covariates have {Yt.shape[1]} columns, anchors have {cmo.anchors_y.shape[1]}"
        )
    if Yt.shape[0] == 0:
        A = np.zeros((cmo.n_anchor, 0))
    else:
        A = cmo.solve(cached_gram(cache, cmo.l_spec, _anchor_tag(cmo), cmo.anchors_y, Yt))
    return MediationOperator(A, cmo.lam, A.shape[0], A.shape[1], cmo.mode)


def _check_pair(cmo: CmoRep, A: MediationOperator) -> None:
    if A.n_rows != cmo.n_anchor or A.mode != cmo.mode:
        raise DimensionMismatch("mediation operator does not belong to this conditional mean operator")


def cmp_cov(cmo: CmoRep, A: MediationOperator, hr_noise_sd: float = 0.0,
            cache: GramCache | None = None) -> np.ndarray:
    """Empirical covariance matrix of the conditional mean process at the targets."""
    if hr_noise_sd < 0:
        raise NegativeNoise(f"hr_noise_sd must be nonnegative, got {hr_noise_sd}")
    _check_pair(cmo, A)
    a = A.matrix
    s2 = float(hr_noise_sd) ** 2
    if not cmo.bag_level:
        K = cached_gram(cache, cmo.k_spec, "kxx", cmo.anchors.points)
        Q = a.T @ (K @ a)
        if s2:
            Q += s2 * (a.T @ a)
    else:
        if cmo.bag_mean_gram is None:
            raise ValueError("operator was built without its bag-mean Gram")
        Q = a.T @ (cmo.bag_mean_gram @ a)
        if s2:
            Q += s2 * (a.T @ (a / cmo.anchors.sizes[:, None]))
    return 0.5 * (Q + Q.T)


def _kernel_rows(cmo: CmoRep, X_star: np.ndarray) -> np.ndarray:
    if not cmo.bag_level:
        return gram(cmo.k_spec, X_star, cmo.anchors.points)
    return bag_mean_kernel(cmo.k_spec, cmo.anchors, X_star)


def cross_cov(cmo: CmoRep, A: MediationOperator, X_star) -> np.ndarray:
    """Covariance between the latent field at ``X_star`` and the targets, ``|X*| x M``."""
    _check_pair(cmo, A)
    X_star = np.asarray(X_star, dtype=float)
    if X_star.ndim == 1:
        X_star = X_star[:, None]
    if X_star.shape[1] != cmo.anchors.dim_x:
        raise DimensionMismatch(f"queries have {X_star.shape[1]} columns, data have {cmo.anchors.dim_x}")
    out = np.empty((X_star.shape[0], A.n_cols))
    for i in range(0, X_star.shape[0], _QUERY_BLOCK):
        rows = slice(i, i + _QUERY_BLOCK)
        out[rows] = _kernel_rows(cmo, X_star[rows]) @ A.matrix
    return out


def lifted_operator(cmo: CmoRep, A: MediationOperator) -> np.ndarray:
    """Point-level ``N_tot x M`` matrix ``A~`` with ``Q = A~^T K A~`` in both modes.

    For bag-level operators each bag row of ``A`` is spread over the bag's
    points with weight ``1 / n_j``.
    """
    _check_pair(cmo, A)
    if not cmo.bag_level:
        return A.matrix
    sizes = cmo.anchors.sizes
    return np.repeat(A.matrix / sizes[:, None], sizes, axis=0)


# ---------------------------------------------------------- embeddings
def _unique_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inv = np.unique(a, axis=0, return_inverse=True)
    return uniq, inv.ravel()


def cme_grid(cmo: CmoRep, y_values, x_values) -> np.ndarray:
    """Conditional mean embedding evaluated on every (y, x) combination.

    Returns an ``(n_y, n_x)`` matrix with entry ``mu_{X | Y = y_a}(x_b)``.
    """
    Y = np.asarray(y_values, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    X = np.asarray(x_values, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    W = cmo.solve(gram(cmo.l_spec, cmo.anchors_y, Y, dtype=cmo.factor.lower_factor.dtype))
    kx = _kernel_rows(cmo, X)  # n_x x n_anchor
    return (kx @ W).T


def cme_evaluate(cmo: CmoRep, y_star, x_star) -> np.ndarray:
    """``mu_{X | Y = y*_i}(x*_i)`` for paired rows of ``y_star`` and ``x_star``."""
    Y = np.asarray(y_star, dtype=float)
    Y = Y.reshape(-1, cmo.anchors_y.shape[1]) if Y.ndim < 2 else Y
    X = np.asarray(x_star, dtype=float)
    X = X.reshape(-1, cmo.anchors.dim_x) if X.ndim < 2 else X
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"{Y.shape[0]} covariates for {X.shape[0]} inputs")
    uy, iy = _unique_rows(Y)
    ux, ix = _unique_rows(X)
    if uy.shape[0] * ux.shape[0] <= 4 * Y.shape[0] + 4096:
        return cme_grid(cmo, uy, ux)[iy, ix]
    out = np.empty(Y.shape[0])
    for i in range(0, Y.shape[0], 256):
        rows = slice(i, i + 256)
        out[rows] = np.diagonal(cme_grid(cmo, Y[rows], X[rows]))
    return out


# ------------------------------------------------------------- DMO path
def dmo_estimate_f(
    bags: BagDataset,
    aggregates: AggregateDataset,
    k: KernelSpec,
    l: KernelSpec,
    lam: float,
    eps: float,
    X_star,
) -> np.ndarray:
    """Direct deconditional estimate ``k(x, x) A (A^T K A + M eps I)^{-1} z~``.

    Uses the replicated operator.
    """
    if not (np.isfinite(eps) and eps > 0):
        raise NonPositiveLambda(f"eps must be positive, got {eps}")
    cmo = build_cmo(bags, k, l, lam, REPLICATED)
    A = mediation(cmo, aggregates.covariates)
    a = A.matrix
    K = gram(k, bags.points)
    G = a.T @ K @ a
    G = 0.5 * (G + G.T)
    G[np.diag_indices(A.n_cols)] += A.n_cols * eps
    coef = solve_psd(chol_psd(G), aggregates.targets)
    return cross_cov(cmo, A, X_star) @ coef
