"""Jittered Cholesky factorisation and the solves built on it.

Every regularised inverse in the package is computed through
:func:`chol_psd` / :func:`solve_psd`, so that jitter escalation is handled
(and logged) in exactly one place.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import get_lapack_funcs, solve_triangular

from .errors import DimensionMismatch, FactorizationFailed, NotSymmetric

log = logging.getLogger(__name__)

DEFAULT_JITTER: tuple[float, ...] = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
SYMMETRY_RTOL = 1e-10

# rows per block when touching very large matrices in place
_BLOCK = 2048


@dataclass(frozen=True)
class PsdFactor:
    """Lower Cholesky factor of ``matrix + jitter_used * I``."""

    lower_factor: np.ndarray
    jitter_used: float
    dim: int

    def reconstruct(self) -> np.ndarray:
        return self.lower_factor @ self.lower_factor.T


def _max_asymmetry(m: np.ndarray) -> float:
    n = m.shape[0]
    worst = 0.0
    for i in range(0, n, _BLOCK):
        rows = slice(i, min(i + _BLOCK, n))
        worst = max(worst, float(np.max(np.abs(m[rows, :] - m[:, rows].T), initial=0.0)))
    return worst


def _symmetrize_inplace(m: np.ndarray) -> None:
    n = m.shape[0]
    for i in range(0, n, _BLOCK):
        ri = slice(i, min(i + _BLOCK, n))
        for j in range(i, n, _BLOCK):
            rj = slice(j, min(j + _BLOCK, n))
            avg = 0.5 * (m[ri, rj] + m[rj, ri].T)
            m[ri, rj] = avg
            m[rj, ri] = avg.T


def _restore_lower_from_upper(c: np.ndarray, diag: np.ndarray) -> None:
    # potrf(clean=0) leaves the strict upper triangle untouched
    n = c.shape[0]
    for i in range(0, n, _BLOCK):
        ri = slice(i, min(i + _BLOCK, n))
        for j in range(0, i + _BLOCK, _BLOCK):
            if j >= n:
                break
            rj = slice(j, min(j + _BLOCK, n))
            blk = c[rj, ri].T
            if j == i:
                low = np.tril(np.ones(blk.shape, dtype=bool), -1)
                c[ri, rj][low] = blk[low]
            else:
                c[ri, rj] = blk
    c[np.diag_indices(n)] = diag


def _zero_strict_upper(c: np.ndarray) -> None:
    n = c.shape[0]
    for i in range(0, n, _BLOCK):
        ri = slice(i, min(i + _BLOCK, n))
        blk = c[ri, i:]
        rows = np.arange(ri.start, ri.stop)[:, None]
        cols = np.arange(i, n)[None, :]
        blk[cols > rows] = 0.0


def chol_psd(
    matrix: np.ndarray,
    jitter_schedule: Sequence[float] = DEFAULT_JITTER,
    overwrite: bool = False,
) -> PsdFactor:
    """Factor a symmetric PSD matrix, escalating diagonal jitter on failure.

    Parameters
    ----------
    matrix : (n, n) array
        Symmetric to a relative tolerance of 1e-10; small asymmetries are
        averaged away before factorisation. float32 input stays float32.
    jitter_schedule : ascending sequence of nonnegative floats
        The first jitter for which LAPACK succeeds is used.
    overwrite : bool
        Factor in place. Lets matrices that only fit in memory once be
        factored; the caller must not reuse ``matrix`` afterwards.

    Raises
    ------
    NotSymmetric, FactorizationFailed
    """
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if m.dtype not in (np.float32, np.float64):
        m = m.astype(np.float64)
    n = m.shape[0]
    if n == 0:
        return PsdFactor(lower_factor=np.zeros((0, 0), dtype=m.dtype), jitter_used=0.0, dim=0)
    schedule = [float(j) for j in jitter_schedule]
    if not schedule or any(j < 0 for j in schedule) or schedule != sorted(schedule):
        raise ValueError("jitter_schedule must be a nonempty ascending list of nonnegative values")

    scale = float(np.max(np.abs(m), initial=0.0))
    asym = _max_asymmetry(m)
    if asym > SYMMETRY_RTOL * max(scale, np.finfo(np.float64).tiny):
        raise NotSymmetric(f"max asymmetry {asym:.3e} exceeds tolerance (scale {scale:.3e})")

    # work on a Fortran view so LAPACK can operate in place
    if overwrite and m.flags.c_contiguous:
        work = m.T
    elif overwrite and m.flags.f_contiguous:
        work = m
    else:
        work = np.array(m, order="F", copy=True)
    if asym > 0.0:
        _symmetrize_inplace(work)
    diag = work.diagonal().copy()
    (potrf,) = get_lapack_funcs(("potrf",), (work,))

    prev = 0.0
    for jitter in schedule:
        if jitter != prev:
            work[np.diag_indices(n)] = diag + jitter
        c, info = potrf(work, lower=1, clean=0, overwrite_a=1)
        if info == 0:
            _zero_strict_upper(c)
            if jitter > 0.0:
                log.info("cholesky of %dx%d matrix needed jitter %.1e", n, n, jitter)
            return PsdFactor(lower_factor=c, jitter_used=jitter, dim=n)
        if info < 0:
            raise FactorizationFailed(f"illegal argument {-info} passed to potrf")
        log.debug("cholesky failed at jitter %.1e (leading minor %d)", jitter, info)
        _restore_lower_from_upper(c, diag)
        work = c
        prev = -1.0  # force the diagonal to be rewritten
    raise FactorizationFailed(
        f"cholesky of {n}x{n} matrix failed for all jitters up to {schedule[-1]:.1e}"
    )


def _check_rhs(factor: PsdFactor, rhs: np.ndarray) -> np.ndarray:
    b = np.asarray(rhs)
    if b.ndim == 0 or b.shape[0] != factor.dim:
        raise DimensionMismatch(
            f"rhs has {b.shape[0] if b.ndim else 0} rows, factor has dim {factor.dim}"
        )
    return b


def solve_psd(factor: PsdFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(M + jitter I) X = rhs`` from a :class:`PsdFactor`."""
    b = _check_rhs(factor, rhs)
    if factor.dim == 0:
        return np.zeros_like(b, dtype=np.float64)
    (potrs,) = get_lapack_funcs(("potrs",), (factor.lower_factor, b))
    x, info = potrs(factor.lower_factor, b.astype(factor.lower_factor.dtype, copy=False), lower=1)
    if info != 0:
        raise FactorizationFailed(f"potrs returned info={info}")
    return x


def half_solve(factor: PsdFactor, rhs: np.ndarray) -> np.ndarray:
    """Return ``L^{-1} rhs`` so that ``||L^{-1} b||^2 = b^T (M + jitter I)^{-1} b``."""
    b = _check_rhs(factor, rhs)
    if factor.dim == 0:
        return np.zeros_like(b, dtype=np.float64)
    return solve_triangular(factor.lower_factor, b, lower=True, check_finite=False)


def logdet_psd(factor: PsdFactor) -> float:
    d = np.diagonal(factor.lower_factor)
    return float(2.0 * np.sum(np.log(d.astype(np.float64))))
