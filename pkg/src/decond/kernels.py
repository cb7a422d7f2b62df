"""Composite kernels on feature subsets.

A :class:`KernelSpec` is a sum of terms; each term applies one base family
(Gaussian, Matérn-3/2 or Kronecker delta) to an explicit subset of input
columns. Hyperparameters are exposed as a flat log-space vector so the
training loops can take unconstrained steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import (
    DegenerateInput,
    DimensionMismatch,
    NonPositiveHyperparameter,
    UnsupportedFamily,
)

GAUSSIAN = "gaussian"
MATERN32 = "matern32"
DELTA = "delta"
FAMILIES = (GAUSSIAN, MATERN32, DELTA)

_SQRT3 = math.sqrt(3.0)
# cap on entries materialised per row block of a Gram matrix
_BLOCK_ENTRIES = 4_000_000


@dataclass(frozen=True)
class KernelTerm:
    family: str
    features: tuple[int, ...]
    lengthscales: tuple[float, ...] = ()
    variance: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnsupportedFamily(f"unknown kernel family {self.family!r}")
        object.__setattr__(self, "features", tuple(int(f) for f in self.features))
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in self.lengthscales))
        if not self.features or any(f < 0 for f in self.features):
            raise DimensionMismatch("a kernel term needs nonnegative feature indices")
        if self.family == DELTA:
            if self.lengthscales:
                raise DimensionMismatch("delta terms take no lengthscales")
        elif len(self.lengthscales) != len(self.features):
            raise DimensionMismatch(
                f"{len(self.lengthscales)} lengthscales for {len(self.features)} features"
            )
        values = self.lengthscales + (float(self.variance),)
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise NonPositiveHyperparameter(f"nonpositive hyperparameter in {self}")

    @property
    def n_params(self) -> int:
        return len(self.lengthscales) + 1


@dataclass(frozen=True)
class KernelSpec:
    """Sum of :class:`KernelTerm` objects."""

    terms: tuple[KernelTerm, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("a KernelSpec needs at least one term")

    @classmethod
    def single(cls, family: str, features: Sequence[int], lengthscales=(), variance=1.0):
        return cls((KernelTerm(family, tuple(features), tuple(lengthscales), variance),))

    @property
    def input_dim(self) -> int:
        return 1 + max(max(t.features) for t in self.terms)

    @property
    def n_params(self) -> int:
        return sum(t.n_params for t in self.terms)

    @property
    def delta_features(self) -> frozenset[int]:
        return frozenset(f for t in self.terms if t.family == DELTA for f in t.features)

    def log_params(self) -> np.ndarray:
        out: list[float] = []
        for t in self.terms:
            out.extend(math.log(v) for v in t.lengthscales)
            out.append(math.log(t.variance))
        return np.asarray(out)

    def with_log_params(self, theta: Sequence[float]) -> "KernelSpec":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {theta.shape}")
        terms, i = [], 0
        for t in self.terms:
            k = len(t.lengthscales)
            terms.append(
                replace(
                    t,
                    lengthscales=tuple(np.exp(theta[i : i + k])),
                    variance=float(np.exp(theta[i + k])),
                )
            )
            i += k + 1
        return KernelSpec(tuple(terms))

    def param_term_index(self) -> list[int]:
        """Term index owning each entry of :meth:`log_params`."""
        return [ti for ti, t in enumerate(self.terms) for _ in range(t.n_params)]

    def diag(self, n: int) -> np.ndarray:
        """k(x, x) for stationary terms: the sum of variances."""
        return np.full(n, sum(t.variance for t in self.terms))

    # -------------------------------------------------------------- config
    def to_sections(self, prefix: str) -> dict[str, dict[str, str]]:
        out = {}
        for i, t in enumerate(self.terms):
            sec = {"family": t.family, "variance": repr(t.variance)}
            sec["lengthscales"] = ",".join(repr(v) for v in t.lengthscales)
            sec["features"] = ",".join(str(f) for f in t.features)
            out[f"{prefix}.{i}"] = sec
        return out

    @classmethod
    def from_sections(cls, sections: Mapping[str, Mapping[str, str]], prefix: str) -> "KernelSpec":
        names = sorted(
            (s for s in sections if s.startswith(prefix + ".")),
            key=lambda s: int(s.split(".")[-1]),
        )
        terms = []
        for name in names:
            sec = sections[name]
            unknown = set(sec) - {"family", "variance", "lengthscales", "features"}
            if unknown:
                raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
            ls = sec.get("lengthscales", "").strip()
            terms.append(
                KernelTerm(
                    family=sec["family"].strip().lower(),
                    features=tuple(int(v) for v in sec["features"].split(",")),
                    lengthscales=tuple(float(v) for v in ls.split(",")) if ls else (),
                    variance=float(sec.get("variance", "1.0")),
                )
            )
        return cls(tuple(terms))


# ------------------------------------------------------------------ grams
def _as2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionMismatch(f"inputs must be 2-D, got shape {x.shape}")
    return x


def _check_delta_codes(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)) or not np.array_equal(a, np.round(a)):
            raise UnsupportedFamily("delta kernel features must be integer coded")


def term_base(term: KernelTerm, X: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """Unit-variance base kernel of one term between row sets."""
    a = X[:, term.features]
    b = X2[:, term.features]
    if term.family == DELTA:
        _check_delta_codes(a, b)
        eq = np.ones((a.shape[0], b.shape[0]), dtype=bool)
        for c in range(a.shape[1]):
            eq &= a[:, c][:, None] == b[:, c][None, :]
        return eq.astype(float)
    ls = np.asarray(term.lengthscales)
    d2 = cdist(a / ls, b / ls, "sqeuclidean")
    if term.family == GAUSSIAN:
        d2 *= -0.5
        return np.exp(d2, out=d2)
    r = np.sqrt(d2, out=d2)
    r *= _SQRT3
    e = np.exp(-r)
    r += 1.0
    r *= e
    return r


def _check_dims(spec: KernelSpec, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.shape[1] < spec.input_dim:
            raise DimensionMismatch(
                f"kernel uses feature {spec.input_dim - 1} but inputs have {a.shape[1]} columns"
            )


def gram(
    spec: KernelSpec,
    X,
    X2=None,
    rff: Mapping[int, "RffMap"] | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """Gram matrix ``sum_t variance_t * base_t(X, X2)``.

    ``rff`` optionally maps term indices to random Fourier feature maps
    that replace the exact evaluation of those (Gaussian) terms. Large
    outputs are assembled in row blocks directly into an array of ``dtype``.
    """
    X = _as2d(X)
    X2 = X if X2 is None else _as2d(X2)
    _check_dims(spec, X, X2)
    n, m = X.shape[0], X2.shape[0]
    out = np.zeros((n, m), dtype=dtype)
    step = max(1, _BLOCK_ENTRIES // max(m, 1))
    rff = rff or {}
    for i in range(0, n, step):
        rows = slice(i, min(i + step, n))
        blk = np.zeros((rows.stop - rows.start, m))
        for ti, term in enumerate(spec.terms):
            if ti in rff:
                blk += rff_gram(rff[ti], X[rows], X2)
            else:
                blk += term.variance * term_base(term, X[rows], X2)
        out[rows] = blk
    return out


# -------------------------------------------------------- median heuristic
def median_heuristic(X, feature_indices: Iterable[int] | None = None, seed: int = 0,
                     max_points: int = 2000) -> float:
    """Median pairwise Euclidean distance over the selected features.

    Inputs with more than ``max_points`` rows are subsampled without
    replacement using ``seed``. If more than half the pairs coincide the
    median of the nonzero distances is returned instead.
    """
    X = _as2d(X)
    if X.shape[0] < 2:
        raise DegenerateInput("median heuristic needs at least two points")
    if feature_indices is not None:
        X = X[:, list(feature_indices)]
    if X.shape[0] > max_points:
        idx = np.random.default_rng(seed).choice(X.shape[0], max_points, replace=False)
        X = X[np.sort(idx)]
    d = pdist(X)
    med = float(np.median(d))
    if med > 0:
        return med
    nz = d[d > 0]
    if nz.size == 0:
        raise DegenerateInput("all points are identical; supply a lengthscale explicitly")
    return float(np.median(nz))


def init_lengthscales(X, features: Sequence[int], seed: int = 0) -> tuple[float, ...]:
    """One median-heuristic lengthscale per feature (ARD initialisation)."""
    out = []
    for f in features:
        try:
            out.append(median_heuristic(X, [f], seed=seed))
        except DegenerateInput:
            out.append(1.0)
    return tuple(out)


# ------------------------------------------------- random Fourier features
@dataclass(frozen=True)
class RffMap:
    frequencies: np.ndarray  # (D, d)
    phases: np.ndarray  # (D,)
    scale: float
    features: tuple[int, ...]
    source: int = 0

    @property
    def n_features(self) -> int:
        return self.phases.shape[0]

    def transform(self, X) -> np.ndarray:
        X = _as2d(X)[:, self.features]
        return self.scale * np.cos(X @ self.frequencies.T + self.phases)


def rff_build(term: KernelTerm, n_features: int, seed: int, source: int = 0) -> RffMap:
    """Sample a random Fourier feature map for a Gaussian term."""
    if term.family != GAUSSIAN:
        raise UnsupportedFamily(f"random Fourier features need a Gaussian term, got {term.family}")
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    rng = np.random.default_rng(seed)
    ls = np.asarray(term.lengthscales)
    freqs = rng.standard_normal((n_features, len(term.features))) / ls
    phases = rng.uniform(0.0, 2.0 * np.pi, n_features)
    return RffMap(
        frequencies=freqs,
        phases=phases,
        scale=math.sqrt(2.0 * term.variance / n_features),
        features=term.features,
        source=source,
    )


def rff_gram(rmap: RffMap, X, X2=None) -> np.ndarray:
    phi = rmap.transform(X)
    phi2 = phi if X2 is None else rmap.transform(X2)
    return phi @ phi2.T


def rff_maps_for(spec: KernelSpec, n_features: int, seed: int) -> dict[int, RffMap]:
    """RFF maps for every Gaussian term of ``spec`` (other terms stay exact)."""
    return {
        i: rff_build(t, n_features, seed + i, source=i)
        for i, t in enumerate(spec.terms)
        if t.family == GAUSSIAN
    }


# ---------------------------------------------------------------- caching
def term_base_tangents(term: KernelTerm, X: np.ndarray, X2: np.ndarray):
    """Base kernel and its derivatives in each log-lengthscale, one at a time.

    Yields the base first, then ``d base / d log ell_r`` for every feature
    of the term: ``base * s_r`` (Gaussian) or ``3 exp(-sqrt3 r) s_r``
    (Matérn-3/2) with ``s_r = (x_r - x'_r)^2 / ell_r^2``. The derivatives
    only scale finite-difference increments, so they are formed in single
    precision.
    """
    if term.family == DELTA:
        raise UnsupportedFamily("delta terms have no lengthscales")
    a = X[:, term.features]
    b = X2[:, term.features]
    ls = np.asarray(term.lengthscales)
    if term.family == GAUSSIAN:
        base = term_base(term, X, X2)
        weight = base.astype(np.float32)
        yield base
        del base
    else:
        r = np.sqrt(cdist(a / ls, b / ls, "sqeuclidean"))
        r *= _SQRT3
        e = np.exp(-r)
        weight = (3.0 * e).astype(np.float32)
        r += 1.0
        r *= e
        del e
        yield r
        del r
    for c in range(a.shape[1]):
        s_r = np.subtract.outer((a[:, c] / ls[c]).astype(np.float32), (b[:, c] / ls[c]).astype(np.float32))
        np.square(s_r, out=s_r)
        s_r *= weight
        yield s_r


class GramCache:
    """LRU cache of unit-variance per-term Gram blocks.

    Finite-difference training perturbs one hyperparameter at a time, so
    most terms of most Grams repeat between objective evaluations. Entries
    are keyed by a caller-chosen ``tag`` naming the input pair together
    with the term's family, features and lengthscales; the variance is
    applied on the way out, so variance perturbations are free. The cache
    assumes the arrays behind a tag never change.

    With ``linear_step = h``, each newly computed block of at least
    ``linear_min`` entries also stores its (reduced) derivatives in the
    log-lengthscales, and a later request whose lengthscales differ from a
    stored block in exactly one coordinate by a log-factor of ``+-h`` is
    answered by the first-order expansion ``base +- h * tangent``. Central
    differences taken through these expansions agree with plain ones to
    ``O(h^2)`` while skipping the exponential of a large block.
    """

    def __init__(self, max_entries: int = 48, linear_step: float = 0.0,
                 linear_min: int = 250_000):
        from collections import OrderedDict

        self._store: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
        self._tangents: dict[tuple, tuple[np.ndarray, ...]] = {}
        self.max_entries = int(max_entries)
        self.linear_step = float(linear_step)
        self.linear_min = int(linear_min)
        self.hits = 0
        self.misses = 0
        self.linearized = 0

    def _remember(self, key, val, tangents=None) -> None:
        self._store[key] = val
        if tangents is not None:
            self._tangents[key] = tangents
        while len(self._store) > self.max_entries:
            old, _ = self._store.popitem(last=False)
            self._tangents.pop(old, None)

    def _expansion(self, key) -> np.ndarray | None:
        tag, family, features, ls = key
        h = self.linear_step
        want = np.log(ls)
        for ckey, tans in self._tangents.items():
            if ckey[:3] != key[:3]:
                continue
            diff = want - np.log(ckey[3])
            moved = np.flatnonzero(np.abs(diff) > 1e-12)
            if moved.size != 1 or abs(abs(diff[moved[0]]) - h) > 1e-9:
                continue
            c = int(moved[0])
            return self._store[ckey] + math.copysign(h, diff[c]) * tans[c]
        return None

    def base(self, tag, term: KernelTerm, X, X2, reducer=None) -> np.ndarray:
        key = (tag, term.family, term.features, term.lengthscales)
        hit = self._store.get(key)
        if hit is not None:
            self._store.move_to_end(key)
            self.hits += 1
            return hit
        linear = self.linear_step > 0 and term.family != DELTA
        if linear:
            approx = self._expansion(key)
            if approx is not None:
                self.linearized += 1
                return approx
        self.misses += 1
        red = reducer if reducer is not None else (lambda G: G)
        if linear and X.shape[0] * X2.shape[0] >= self.linear_min:
            parts = term_base_tangents(term, X, X2)
            val = red(next(parts))
            tangents = tuple(np.asarray(red(t), dtype=np.float64) for t in parts)
            self._remember(key, val, tangents)
            return val
        val = red(term_base(term, X, X2))
        self._remember(key, val)
        return val

    def gram(self, spec: KernelSpec, tag, X, X2=None, reducer=None) -> np.ndarray:
        """Like :func:`gram`, with ``reducer`` applied to each base block."""
        X = _as2d(X)
        X2 = X if X2 is None else _as2d(X2)
        _check_dims(spec, X, X2)
        out = None
        for term in spec.terms:
            blk = term.variance * self.base(tag, term, X, X2, reducer)
            out = blk if out is None else out + blk
        return out


def cached_gram(cache: GramCache | None, spec: KernelSpec, tag, X, X2=None, reducer=None):
    if cache is None:
        g = gram(spec, X, X2)
        return g if reducer is None else reducer(g)
    return cache.gram(spec, tag, X, X2, reducer)
