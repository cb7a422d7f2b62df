"""Model registry: one entry point per method, with input/target standardisation.

Every method is fitted through :func:`fit_model` and returns a
:class:`FittedModel` whose :meth:`~FittedModel.predict` gives means and
variances of the latent field in the original units.

Methods
-------
cmp, s-cmp
    Exact deconditional posterior with the replicated / shrinkage operator.
varcmp
    Sparse variational deconditional posterior.
bagg-gp, vbagg
    Aggregated GP (exact / variational). ``vbagg`` falls back to the exact
    model unless variational baselines are enabled.
gpr, vargpr
    GP regression on bag centroids (exact / variational).

Baselines need one target per bag; with indirectly matched data they are
trained on pseudo-targets from a GP regression on the aggregate set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import baselines as bl
from .config import RunConfig, substream
from .datasets import AggregateDataset, BagDataset
from .embeddings import DEFAULT_LAMBDA, REPLICATED, SHRINKAGE, check_mode
from .errors import ConfigError, DimensionMismatch
from ._optim import safe_eval
from .kernels import (
    DELTA,
    FAMILIES,
    GAUSSIAN,
    GramCache,
    KernelSpec,
    KernelTerm,
    init_lengthscales,
    rff_maps_for,
)
from .posterior import (
    fit_exact,
    log_marginal_likelihood,
    posterior_mean,
    posterior_var,
    train_exact,
)
from .variational import (
    VariationalState,
    elbo,
    init_inducing_kmeanspp,
    prior_state,
    q_f_mean_var,
    train_variational,
    with_optimal_q,
)

log = logging.getLogger(__name__)

MODEL_NAMES = ("cmp", "s-cmp", "varcmp", "bagg-gp", "vbagg", "gpr", "vargpr")
# above this many HR points, "auto" makes vbagg variational
AUTO_VARIATIONAL_POINTS = 5000


# ------------------------------------------------------------ settings
@dataclass
class ModelSettings:
    name: str = "cmp"
    lam: float = DEFAULT_LAMBDA
    agg_noise_sd: float = 0.1
    hr_noise_sd: float = 0.0
    prior_mean: float = 0.0
    mode: str = SHRINKAGE
    n_inducing: int = 64
    k_kernel: str = GAUSSIAN
    l_kernel: str = GAUSSIAN
    k_sections: dict = field(default_factory=dict)
    l_sections: dict = field(default_factory=dict)
    standardize: bool = True
    variational_baselines: str = "auto"
    rff_features: int = 0
    steps: int = 100
    variational_steps: int = 400
    learning_rate: float = 0.05
    points_per_bag: int = 0
    train_inducing: bool = False
    start_search: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.name not in MODEL_NAMES:
            raise ConfigError(f"unknown model {self.name!r}; choose from {', '.join(MODEL_NAMES)}")
        try:
            self.mode = check_mode(self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for fam in (self.k_kernel, self.l_kernel):
            if fam not in FAMILIES:
                raise ConfigError(f"unknown kernel family {fam!r}")
        if self.variational_baselines not in ("auto", "true", "false"):
            raise ConfigError("variational_baselines must be auto, true or false")

    @classmethod
    def from_config(cls, cfg: RunConfig, **overrides) -> "ModelSettings":
        kw = dict(
            name=cfg.get("model", "name"),
            lam=cfg.get_float("model", "lambda"),
            agg_noise_sd=cfg.get_float("model", "agg_noise_sd"),
            hr_noise_sd=cfg.get_float("model", "hr_noise_sd"),
            prior_mean=cfg.get_float("model", "prior_mean"),
            mode=cfg.get("model", "mode"),
            n_inducing=cfg.get_int("model", "n_inducing"),
            k_kernel=cfg.get("model", "k_kernel").lower(),
            l_kernel=cfg.get("model", "l_kernel").lower(),
            k_sections=cfg.kernel_sections("k"),
            l_sections=cfg.kernel_sections("l"),
            standardize=cfg.get_bool("model", "standardize"),
            variational_baselines=cfg.get("model", "variational_baselines").lower(),
            rff_features=cfg.get_int("model", "rff_features"),
            steps=cfg.get_int("train", "steps"),
            variational_steps=cfg.get_int("train", "variational_steps"),
            learning_rate=cfg.get_float("train", "learning_rate"),
            points_per_bag=cfg.get_int("train", "points_per_bag"),
            train_inducing=cfg.get_bool("train", "train_inducing"),
            start_search=cfg.get_bool("train", "start_search"),
            seed=cfg.get_int("train", "seed"),
        )
        kw.update(overrides)
        return cls(**kw)


# ------------------------------------------------------- standardising
@dataclass(frozen=True, eq=False)
class Standardizer:
    """Affine maps to zero-mean, unit-variance features and targets.

    Features used by delta kernels are left untouched.
    """

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    z_mean: float
    z_scale: float

    @classmethod
    def identity(cls, dim_x: int, dim_y: int) -> "Standardizer":
        return cls(np.zeros(dim_x), np.ones(dim_x), np.zeros(dim_y), np.ones(dim_y), 0.0, 1.0)

    @classmethod
    def fit(cls, d1: BagDataset, d2: AggregateDataset, skip_x=(), skip_y=()) -> "Standardizer":
        def stats(a, skip):
            mu = a.mean(axis=0)
            sd = a.std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            for j in skip:
                mu[j], sd[j] = 0.0, 1.0
            return mu, sd

        xm, xs = stats(d1.points, skip_x)
        ys_all = np.vstack([d1.covariates, d2.covariates]) if d2.size else d1.covariates
        ym, ysd = stats(ys_all, skip_y)
        if d2.size:
            zm = float(d2.targets.mean())
            zs = float(d2.targets.std()) if d2.size > 1 and d2.targets.std() > 0 else 1.0
        else:
            zm, zs = 0.0, 1.0
        return cls(xm, xs, ym, ysd, zm, zs)

    def x(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        if X.shape[1] != self.x_mean.size:
            raise DimensionMismatch(f"inputs have {X.shape[1]} columns, model expects {self.x_mean.size}")
        return (X - self.x_mean) / self.x_scale

    def y(self, Y) -> np.ndarray:
        return (np.asarray(Y, dtype=float) - self.y_mean) / self.y_scale

    def d1(self, d1: BagDataset) -> BagDataset:
        return BagDataset(self.x(d1.points), d1.sizes, self.y(d1.covariates), d1.bag_ids)

    def d2(self, d2: AggregateDataset) -> AggregateDataset:
        return AggregateDataset(self.y(d2.covariates), (d2.targets - self.z_mean) / self.z_scale)

    def mean_out(self, m) -> np.ndarray:
        return np.asarray(m) * self.z_scale + self.z_mean

    def var_out(self, v) -> np.ndarray:
        return np.asarray(v) * self.z_scale**2

    def to_section(self) -> dict[str, str]:
        return {
            "x_mean": _vec(self.x_mean), "x_scale": _vec(self.x_scale),
            "y_mean": _vec(self.y_mean), "y_scale": _vec(self.y_scale),
            "z_mean": repr(self.z_mean), "z_scale": repr(self.z_scale),
        }

    @classmethod
    def from_section(cls, sec: dict[str, str]) -> "Standardizer":
        return cls(_unvec(sec["x_mean"]), _unvec(sec["x_scale"]), _unvec(sec["y_mean"]),
                   _unvec(sec["y_scale"]), float(sec["z_mean"]), float(sec["z_scale"]))


def _vec(a) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(a))


def _unvec(s: str) -> np.ndarray:
    s = s.strip()
    return np.array([float(v) for v in s.split(",")]) if s else np.zeros(0)


# --------------------------------------------------------------- kernels
def _terms_from_sections(sections: dict, X: np.ndarray, seed: int) -> KernelSpec | None:
    if not sections:
        return None
    names = sorted(sections, key=lambda s: int(s.split(".")[-1]))
    terms = []
    for name in names:
        sec = sections[name]
        fam = sec["family"].strip().lower()
        feats = tuple(int(v) for v in sec["features"].split(","))
        if any(f >= X.shape[1] for f in feats):
            raise DimensionMismatch(f"[{name}] uses feature {max(feats)} but data have {X.shape[1]} columns")
        ls_txt = sec.get("lengthscales", "auto").strip().lower()
        if fam == DELTA:
            ls = ()
        elif ls_txt in ("", "auto"):
            ls = init_lengthscales(X, feats, seed)
        else:
            ls = tuple(float(v) for v in ls_txt.split(","))
        terms.append(KernelTerm(fam, feats, ls, float(sec.get("variance", "1.0") or 1.0)))
    return KernelSpec(tuple(terms))


def declared_delta_features(sections: dict) -> set[int]:
    out: set[int] = set()
    for sec in sections.values():
        if sec["family"].strip().lower() == DELTA:
            out.update(int(v) for v in sec["features"].split(","))
    return out


def default_kernel(family: str, X: np.ndarray, seed: int) -> KernelSpec:
    """One ARD term of ``family`` over all columns of ``X``."""
    feats = tuple(range(X.shape[1]))
    if family == DELTA:
        return KernelSpec((KernelTerm(DELTA, feats),))
    return KernelSpec((KernelTerm(family, feats, init_lengthscales(X, feats, seed), 1.0),))


def build_kernels(s: ModelSettings, d1: BagDataset, d2: AggregateDataset, seed: int):
    k = _terms_from_sections(s.k_sections, d1.points, seed) or default_kernel(s.k_kernel, d1.points, seed)
    Y = np.vstack([d1.covariates, d2.covariates]) if d2.size else d1.covariates
    l = _terms_from_sections(s.l_sections, Y, seed) or default_kernel(s.l_kernel, Y, seed)
    return k, l


# ------------------------------------------------------------- matching
def is_direct(d1: BagDataset, d2: AggregateDataset) -> bool:
    return d2.size == d1.n_bags and np.array_equal(d1.covariates, d2.covariates)


# ---------------------------------------------------------------- model
@dataclass(eq=False)
class FittedModel:
    name: str
    settings: ModelSettings
    std: Standardizer
    kind: str  # exact | variational | gpr
    payload: Any
    matching: str = "direct"
    bag_targets: np.ndarray | None = None  # standardized targets used by baselines
    mediator: dict = field(default_factory=dict)

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the latent field at ``X``."""
        Xs = self.std.x(X)
        if self.kind == "exact":
            m, v = posterior_mean(self.payload, Xs), posterior_var(self.payload, Xs)
        elif self.kind == "variational":
            rff = None
            if self.settings.rff_features > 0:
                rff = rff_maps_for(self.payload.k_spec, self.settings.rff_features,
                                   substream(self.settings.seed, "rff"))
            m, v = q_f_mean_var(self.payload, Xs, rff)
        else:
            m, v = bl.gpr_mean(self.payload, Xs), bl.gpr_var(self.payload, Xs)
        return self.std.mean_out(m), self.std.var_out(v)

    @property
    def hyper(self) -> dict:
        p = self.payload
        if self.kind == "gpr":
            return dict(k_spec=p.k_spec, l_spec=None, agg_noise_sd=p.noise_sd, hr_noise_sd=0.0,
                        prior_mean=p.prior_mean)
        return dict(k_spec=p.k_spec, l_spec=p.l_spec, agg_noise_sd=p.agg_noise_sd,
                    hr_noise_sd=p.hr_noise_sd, prior_mean=getattr(p, "prior_mean", 0.0))


def _variational_baselines(s: ModelSettings, d1: BagDataset) -> bool:
    if s.variational_baselines == "auto":
        return d1.total_points > AUTO_VARIATIONAL_POINTS
    return s.variational_baselines == "true"


def _train_bags(s: ModelSettings, d1: BagDataset) -> BagDataset:
    if s.points_per_bag and s.points_per_bag > 0:
        return d1.subsample(s.points_per_bag, substream(s.seed, "subsample"))
    return d1


# ------------------------------------------------------- start search
# Averaging n independent points divides the field variance by n, so the
# aggregate-scale variance can understate the field's by up to the bag size.
START_NOISE_FACTORS = (1.0, 5.0)
START_L_LENGTHSCALE_FACTORS = (1.0, 0.1)


def _scaled(spec: KernelSpec, variance: float = 1.0, lengthscale: float = 1.0) -> KernelSpec:
    return KernelSpec(tuple(
        replace(t, variance=t.variance * variance,
                lengthscales=tuple(v * lengthscale for v in t.lengthscales))
        for t in spec.terms
    ))


def start_candidates(k: KernelSpec, l: KernelSpec | None, sigma: float, mean_bag_size: float):
    """Small deterministic design of starting points ``(k, l, sigma)``.

    Field variance factors ``{1, mean bag size}``, noise factors ``{1, 5}``
    and, when ``l`` is given, covariate lengthscale factors ``{1, 0.1}``.
    """
    variances = sorted({1.0, max(1.0, float(mean_bag_size))})
    lfs = START_L_LENGTHSCALE_FACTORS if l is not None and l.n_params > len(l.terms) else (1.0,)
    out = []
    for fv in variances:
        for fs in START_NOISE_FACTORS:
            for fl in lfs:
                out.append((_scaled(k, fv), None if l is None else _scaled(l, 1.0, fl), sigma * fs))
    return out


def _best_start(cands, score, enabled: bool = True):
    """Candidate with the highest finite score (the first one if disabled)."""
    if not enabled or len(cands) == 1:
        return cands[0]
    vals = [safe_eval(lambda _: score(*c), None) for c in cands]
    best = int(np.argmax(vals))
    if not np.isfinite(vals[best]):
        return cands[0]
    log.debug("start search scores %s, picked %d", np.round(vals, 3), best)
    return cands[best]


def _pseudo_targets(s: ModelSettings, d1: BagDataset, d2: AggregateDataset, l: KernelSpec):
    """Standardised targets per bag: direct targets, or mediator-GP pseudo-targets."""
    if is_direct(d1, d2):
        return d2.targets.copy(), "direct", {}
    cands = start_candidates(l, None, s.agg_noise_sd, 1.0)
    l0, _, sg = _best_start(
        cands, lambda kk, _l, sg: bl.gpr_lml(bl.fit_gpr(d2.covariates, d2.targets, kk, sg)),
        s.start_search)
    g = bl.fit_gpr(d2.covariates, d2.targets, l0, sg)
    g = bl.train_gpr(g, s.steps, s.learning_rate)
    pt = bl.make_pseudo_targets(d1.covariates, d2, g.k_spec, g.noise_sd, g.prior_mean)
    info = {"sigma_g": g.noise_sd, "mean_g": g.prior_mean, "l_spec": g.k_spec}
    return pt.pseudo_targets, "indirect", info


def _fit_variational(s, d1, d2, k, l, lam, mode, sigma, varsigma, inducing_from, vary_l=True):
    w = init_inducing_kmeanspp(inducing_from, min(s.n_inducing, inducing_from.shape[0]),
                               substream(s.seed, "init"))
    cache = GramCache()

    def state_for(kk, ll, sg):
        return prior_state(w, kk, ll, lam, sg, varsigma, mode)

    def score(kk, ll, sg):
        st = state_for(kk, l if ll is None else ll, sg)
        return elbo(with_optimal_q(st, d1, d2, cache), d1, d2, cache)

    cands = start_candidates(k, l if vary_l else None, sigma, d1.total_points / d1.n_bags)
    kk, ll, sg = _best_start(cands, score, s.start_search)
    st = with_optimal_q(state_for(kk, l if ll is None else ll, sg), d1, d2)
    st = train_variational(st, _train_bags(s, d1), d2, s.variational_steps, s.learning_rate,
                           seed=substream(s.seed, "train"), train_inducing=s.train_inducing)
    # the bound only improves when q(u) is re-solved at the final hyperparameters
    return with_optimal_q(st, d1, d2)


def fit_model(d1: BagDataset, d2: AggregateDataset, settings: ModelSettings) -> FittedModel:
    """Fit and train the method named by ``settings.name``."""
    s = settings
    skip_x = declared_delta_features(s.k_sections) | (set(range(d1.dim_x)) if s.k_kernel == DELTA else set())
    skip_y = declared_delta_features(s.l_sections) | (set(range(d1.dim_y)) if s.l_kernel == DELTA else set())
    std = Standardizer.fit(d1, d2, skip_x, skip_y) if s.standardize else Standardizer.identity(d1.dim_x, d1.dim_y)
    t1, t2 = std.d1(d1), std.d2(d2)
    k, l = build_kernels(s, t1, t2, substream(s.seed, "init"))
    sigma, varsigma = s.agg_noise_sd, s.hr_noise_sd
    name = s.name

    if name in ("cmp", "s-cmp"):
        mode = REPLICATED if name == "cmp" else SHRINKAGE
        cache = GramCache()
        cands = start_candidates(k, l, sigma, t1.total_points / t1.n_bags)
        k, l, sigma = _best_start(cands, lambda kk, ll, sg: log_marginal_likelihood(
            fit_exact(t1, t2, kk, ll, s.lam, sg, varsigma, mode, s.prior_mean, cache=cache)),
            s.start_search)
        model = fit_exact(t1, t2, k, l, s.lam, sigma, varsigma, mode, s.prior_mean)
        model = train_exact(model, s.steps, s.learning_rate, substream(s.seed, "train"),
                            train_data=_train_bags(s, t1))
        return FittedModel(name, s, std, "exact", model, "direct" if is_direct(t1, t2) else "indirect")

    if name == "varcmp":
        st = _fit_variational(s, t1, t2, k, l, s.lam, s.mode, sigma, varsigma, t1.points)
        return FittedModel(name, s, std, "variational", st, "direct" if is_direct(t1, t2) else "indirect")

    # baselines: one (pseudo-)target per bag
    z, matching, info = _pseudo_targets(s, t1, t2, l)
    n_bar = t1.total_points / t1.n_bags
    if name == "gpr":
        cent = t1.centroids()
        k, _, sigma = _best_start(start_candidates(k, None, sigma, n_bar), lambda kk, _l, sg: bl.gpr_lml(
            bl.fit_gpr(cent, z, kk, sg, s.prior_mean)), s.start_search)
        g = bl.fit_gpr_centroid(t1, z, k, sigma, s.prior_mean)
        g = bl.train_gpr(g, s.steps, s.learning_rate)
        return FittedModel(name, s, std, "gpr", g, matching, z, info)

    if name == "vargpr":
        cent = t1.centroids()
        c1, c2 = bl.index_datasets(BagDataset(cent, np.ones(t1.n_bags, dtype=int), t1.covariates), z)
        st = _fit_variational(s, c1, c2, k, bl.INDEX_KERNEL, bl.BAGG_LAMBDA, SHRINKAGE, sigma, 0.0,
                              t1.points, vary_l=False)
        return FittedModel(name, s, std, "variational", st, matching, z, info)

    if name == "vbagg" and _variational_baselines(s, t1):
        c1, c2 = bl.index_datasets(t1, z)
        st = _fit_variational(s, c1, c2, k, bl.INDEX_KERNEL, bl.BAGG_LAMBDA, SHRINKAGE, sigma, 0.0,
                              t1.points, vary_l=False)
        return FittedModel(name, s, std, "variational", st, matching, z, info)

    # bagg-gp, or vbagg collapsed to the exact aggregated GP
    cache = GramCache()
    k, _, sigma = _best_start(start_candidates(k, None, sigma, n_bar), lambda kk, _l, sg: log_marginal_likelihood(
        bl.fit_bagg_gp(t1, z, kk, sg, s.prior_mean, cache=cache)), s.start_search)
    model = bl.fit_bagg_gp(t1, z, k, sigma, s.prior_mean)
    tb = _train_bags(s, t1)
    model = train_exact(model, s.steps, s.learning_rate, train_data=tb.with_covariates(model.d1.covariates))
    return FittedModel(name, s, std, "exact", model, matching, z, info)


# ------------------------------------------------------------ persistence
def _spec_sections(spec: KernelSpec | None, prefix: str) -> dict:
    return spec.to_sections(prefix) if spec is not None else {}


def model_to_sections(fm: FittedModel, data_paths: dict[str, str] | None = None) -> dict[str, dict[str, str]]:
    """Flat key=value sections describing a fitted model."""
    p = fm.payload
    h = fm.hyper
    model_sec = {
        "name": fm.name,
        "kind": fm.kind,
        "matching": fm.matching,
        "lambda": repr(getattr(p, "lam", fm.settings.lam)),
        "agg_noise_sd": repr(float(h["agg_noise_sd"])),
        "hr_noise_sd": repr(float(h["hr_noise_sd"])),
        "prior_mean": repr(float(h["prior_mean"])),
        "mode": getattr(p, "mode", ""),
        "rff_features": str(fm.settings.rff_features),
        "seed": str(fm.settings.seed),
        "standardize": str(fm.settings.standardize).lower(),
    }
    out = {"model": model_sec, "standardize": fm.std.to_section()}
    out["data"] = dict(data_paths or {})
    out.update(_spec_sections(h["k_spec"], "k"))
    out.update(_spec_sections(h["l_spec"], "l"))
    if fm.bag_targets is not None:
        out["targets"] = {"values": _vec(fm.bag_targets)}
    if fm.kind == "variational":
        rows, cols = np.tril_indices(p.n_inducing)
        out["variational"] = {
            "n_inducing": str(p.n_inducing),
            "dim": str(p.inducing.shape[1]),
            "inducing": _vec(p.inducing),
            "var_mean": _vec(p.var_mean),
            "var_chol": _vec(p.var_chol[rows, cols]),
        }
    if fm.kind == "gpr":
        out["gpr"] = {"inputs": _vec(p.X), "dim": str(p.X.shape[1]), "targets": _vec(p.y)}
    return out


def save_model(path, fm: FittedModel, data_paths: dict[str, str] | None = None) -> None:
    import configparser

    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, sec in model_to_sections(fm, data_paths).items():
        cp[name] = sec
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def load_model(path, d1: BagDataset | None = None, d2: AggregateDataset | None = None) -> FittedModel:
    """Rebuild a fitted model; exact models refit their caches from the data files."""
    import configparser

    from .datasets import read_aggregates_csv, read_bags_csv

    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    secs = {s: dict(cp[s]) for s in cp.sections()}
    ms = secs["model"]
    k = KernelSpec.from_sections(secs, "k")
    l = KernelSpec.from_sections(secs, "l") if any(s.startswith("l.") for s in secs) else None
    std = Standardizer.from_section(secs["standardize"])
    kind = ms["kind"]
    settings = ModelSettings(name=ms["name"], rff_features=int(ms.get("rff_features", "0")),
                             seed=int(ms.get("seed", "0")),
                             standardize=ms.get("standardize", "true") == "true")
    sigma, varsigma = float(ms["agg_noise_sd"]), float(ms["hr_noise_sd"])
    m0, lam = float(ms["prior_mean"]), float(ms["lambda"])
    z = _unvec(secs["targets"]["values"]) if "targets" in secs else None
    if kind == "variational":
        v = secs["variational"]
        d, dim = int(v["n_inducing"]), int(v["dim"])
        chol = np.zeros((d, d))
        chol[np.tril_indices(d)] = _unvec(v["var_chol"])
        st = VariationalState(_unvec(v["inducing"]).reshape(d, dim), _unvec(v["var_mean"]), chol,
                              k, l, lam, sigma, varsigma, ms["mode"] or SHRINKAGE)
        return FittedModel(ms["name"], settings, std, kind, st, ms["matching"], z)
    if kind == "gpr":
        g = secs["gpr"]
        X = _unvec(g["inputs"]).reshape(-1, int(g["dim"]))
        return FittedModel(ms["name"], settings, std, kind,
                           bl.fit_gpr(X, _unvec(g["targets"]), k, sigma, m0), ms["matching"], z)
    data = secs.get("data", {})
    if d1 is None:
        d1 = read_bags_csv(data["bags"])
    t1 = std.d1(d1)
    if z is not None:
        c1, c2 = bl.index_datasets(t1, z)
    else:
        if d2 is None:
            d2 = read_aggregates_csv(data["aggregates"])
        c1, c2 = t1, std.d2(d2)
    model = fit_exact(c1, c2, k, l, lam, sigma, varsigma, ms["mode"], m0)
    return FittedModel(ms["name"], settings, std, kind, model, ms["matching"], z)
