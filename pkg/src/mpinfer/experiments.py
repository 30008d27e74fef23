"""The built-in experiment models, data handling, and exact oracles.

Four models: a hierarchical recommender over binarised ratings, a
three-level bus-delay hierarchy with negative-binomial observations, and
two latent timeseries (one terminal observation / one observation every
third step, with the proposal fixed to the prior).

Oracles: exact evidence by total enumeration for small discrete models and
by sequential Gaussian marginalisation for linear-Gaussian chains; both
are independent of the tensor-contraction path and exist to check it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import Bernoulli, Categorical, NegativeBinomial, Normal
from .errors import CapabilityError, DataError, DegenerateEvidenceError, ShapeError
from .estimator import build_data_factors, execute, log_evidence_global
from .estimator import _cached_plan, _global_log_joint
from .log_tensor import _logmeanexp
from .model_graph import DataDecl, Dataset, LatentDecl, ModelGraph, generate_synthetic
from .params import ParamStore
from .proposals import GLOBAL, MP, ProposalDecl, ProposalGraph, SampleBatch
from .training import global_log_weights

RATING_VARIANCE_WEIGHTS = [0.1, 0.5, 0.4, 0.05, 0.05]
BOROUGH_VARIANCE_WEIGHTS = [0.1, 0.4, 0.05, 0.5, 0.05]
ID_VARIANCE_WEIGHTS = [0.1, 0.4, 0.5, 0.05, 0.05]
BUS_TOTAL_COUNT = 130.0


# ---------------------------------------------------------------------------
# model builders


def build_movielens(
    M: int = 50,
    films_per_user: int = 5,
    feature_dim: int = 18,
    features: np.ndarray | None = None,
    feature_seed: int = 0,
):
    """Hierarchical recommender: global mean and discrete variance level, a
    per-user preference vector, Bernoulli ratings through film features.

    `features` (M, films_per_user, feature_dim) overrides the seeded
    standard-normal defaults.
    """
    if M <= 0 or films_per_user <= 0:
        raise ShapeError("sizes must be positive")
    if features is None:
        frng = np.random.default_rng([feature_seed, 18])
        features = frng.standard_normal((M, films_per_user, feature_dim))
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (M, films_per_user, feature_dim):
        raise ShapeError(f"features must have shape {(M, films_per_user, feature_dim)}")

    def mu_builder(par, th):
        return Normal(np.zeros(feature_dim), 1.0, event_ndim=1)

    def psi_builder(par, th):
        return Categorical(weights=RATING_VARIANCE_WEIGHTS)

    def z_builder(par, th):
        var = np.exp(np.asarray(par["psi"], dtype=np.float64))[..., None]
        return Normal(par["mu"], var, event_ndim=1)

    def rating_builder(par, cov, th):
        logit = (np.asarray(par["z"]) * cov["film_features"]).sum(axis=-1)
        return Bernoulli(logit=logit)

    m = ModelGraph(
        plates={"users": M, "films": films_per_user},
        latents=[
            LatentDecl("mu", mu_builder, event_shape=(feature_dim,)),
            LatentDecl("psi", psi_builder, support=5),
            LatentDecl("z", z_builder, parents=("mu", "psi"), plates=("users",),
                       event_shape=(feature_dim,)),
        ],
        data=[DataDecl("rating", rating_builder, parents=("z",), plates=("users", "films"))],
        covariates={"film_features": features},
    )

    phi = ParamStore({
        "q_mu_loc": np.zeros(feature_dim),
        "q_mu_logvar": np.zeros(feature_dim),
        "q_psi_logits": np.zeros(5),
        "q_z_loc": np.zeros((M, feature_dim)),
        "q_z_logvar": np.zeros((M, feature_dim)),
    })
    q = ProposalGraph(m, [
        ProposalDecl("mu", lambda par, ph: Normal(
            ph.ref("q_mu_loc"), log_var=ph.ref("q_mu_logvar"), event_ndim=1)),
        ProposalDecl("psi", lambda par, ph: Categorical(logits=ph.ref("q_psi_logits"))),
        ProposalDecl("z", lambda par, ph: Normal(
            ph.ref("q_z_loc"), log_var=ph.ref("q_z_logvar"), event_ndim=1)),
    ], phi, MP)
    return m, q


def build_bus(
    M: int = 3,
    J: int = 3,
    I: int = 30,
    n_companies: int = 10,
    n_journeys: int = 5,
    covariates: dict | None = None,
    covariate_seed: int = 0,
):
    """Three-level delay hierarchy: year -> borough -> id, negative-binomial
    delays with one-hot company/journey covariates weighting learned vectors.

    Discrete variance levels enter through exp() so level 0 still gives a
    positive variance. Weight vectors are replicated per (year, borough)
    so every parent lives in an enclosing plate.
    """
    if min(M, J, I, n_companies, n_journeys) <= 0:
        raise ShapeError("sizes must be positive")
    if covariates is None:
        crng = np.random.default_rng([covariate_seed, 24])
        company = np.eye(n_companies)[crng.integers(0, n_companies, size=(M, J, I))]
        journey = np.eye(n_journeys)[crng.integers(0, n_journeys, size=(M, J, I))]
        covariates = {"company_onehot": company, "journey_onehot": journey}

    def delay_builder(par, cov, th):
        logit = (
            np.asarray(par["id_mean"])
            + (np.asarray(par["company_weight"]) * cov["company_onehot"]).sum(axis=-1)
            + (np.asarray(par["journey_weight"]) * cov["journey_onehot"]).sum(axis=-1)
        )
        return NegativeBinomial(BUS_TOTAL_COUNT, logit)

    m = ModelGraph(
        plates={"years": M, "boroughs": J, "ids": I},
        latents=[
            LatentDecl("year_variance", lambda par, th: Categorical(
                weights=RATING_VARIANCE_WEIGHTS), support=5),
            LatentDecl("year_mean", lambda par, th: Normal(0.0, 1e-4)),
            LatentDecl("borough_mean", lambda par, th: Normal(
                par["year_mean"], np.exp(np.asarray(par["year_variance"], dtype=np.float64))),
                parents=("year_mean", "year_variance"), plates=("years",)),
            LatentDecl("borough_variance", lambda par, th: Categorical(
                weights=BOROUGH_VARIANCE_WEIGHTS), plates=("years", "boroughs"), support=5),
            LatentDecl("id_mean", lambda par, th: Normal(
                par["borough_mean"],
                np.exp(np.asarray(par["borough_variance"], dtype=np.float64))),
                parents=("borough_mean", "borough_variance"), plates=("years", "boroughs")),
            LatentDecl("weight_variance", lambda par, th: Categorical(
                weights=ID_VARIANCE_WEIGHTS), plates=("years", "boroughs", "ids"), support=5),
            LatentDecl("company_weight", lambda par, th: Normal(
                np.zeros(n_companies),
                np.exp(np.asarray(par["weight_variance"], dtype=np.float64))[..., None],
                event_ndim=1),
                parents=("weight_variance",), plates=("years", "boroughs", "ids"),
                event_shape=(n_companies,)),
            LatentDecl("journey_weight", lambda par, th: Normal(
                np.zeros(n_journeys),
                np.exp(np.asarray(par["weight_variance"], dtype=np.float64))[..., None],
                event_ndim=1),
                parents=("weight_variance",), plates=("years", "boroughs", "ids"),
                event_shape=(n_journeys,)),
        ],
        data=[DataDecl("delay", delay_builder,
                       parents=("id_mean", "company_weight", "journey_weight"),
                       plates=("years", "boroughs", "ids"))],
        covariates=covariates,
    )

    phi = ParamStore({
        "q_yv_logits": np.zeros(5),
        "q_ym_loc": np.zeros(()), "q_ym_logvar": np.full((), np.log(1e-4)),
        "q_bm_loc": np.zeros(M), "q_bm_logvar": np.zeros(M),
        "q_bv_logits": np.zeros((M, J, 5)),
        "q_im_loc": np.zeros((M, J)), "q_im_logvar": np.zeros((M, J)),
        "q_wv_logits": np.zeros((M, J, I, 5)),
        "q_cw_loc": np.zeros((M, J, I, n_companies)),
        "q_cw_logvar": np.zeros((M, J, I, n_companies)),
        "q_jw_loc": np.zeros((M, J, I, n_journeys)),
        "q_jw_logvar": np.zeros((M, J, I, n_journeys)),
    })
    q = ProposalGraph(m, [
        ProposalDecl("year_variance", lambda par, ph: Categorical(logits=ph.ref("q_yv_logits"))),
        ProposalDecl("year_mean", lambda par, ph: Normal(
            ph.ref("q_ym_loc"), log_var=ph.ref("q_ym_logvar"))),
        ProposalDecl("borough_mean", lambda par, ph: Normal(
            ph.ref("q_bm_loc"), log_var=ph.ref("q_bm_logvar"))),
        ProposalDecl("borough_variance", lambda par, ph: Categorical(logits=ph.ref("q_bv_logits"))),
        ProposalDecl("id_mean", lambda par, ph: Normal(
            ph.ref("q_im_loc"), log_var=ph.ref("q_im_logvar"))),
        ProposalDecl("weight_variance", lambda par, ph: Categorical(logits=ph.ref("q_wv_logits"))),
        ProposalDecl("company_weight", lambda par, ph: Normal(
            ph.ref("q_cw_loc"), log_var=ph.ref("q_cw_logvar"), event_ndim=1)),
        ProposalDecl("journey_weight", lambda par, ph: Normal(
            ph.ref("q_jw_loc"), log_var=ph.ref("q_jw_logvar"), event_ndim=1)),
    ], phi, MP)
    return m, q


def build_ts_single(N: int = 30):
    """Random-walk chain with increments of variance 1/N and one observation
    at the final step; the walk starts at zero, so the first sampled state
    is z_2 with prior mean 0. The proposal is the prior.
    """
    if N < 2:
        raise ShapeError("N must be at least 2")
    latents = [LatentDecl("z2", lambda par, th: Normal(0.0, 1.0 / N))]
    for i in range(3, N + 1):
        latents.append(LatentDecl(
            f"z{i}",
            lambda par, th, _p=f"z{i - 1}": Normal(par[_p], 1.0 / N),
            parents=(f"z{i - 1}",),
        ))
    m = ModelGraph(
        plates={},
        latents=latents,
        data=[DataDecl("x", lambda par, cov, th, _p=f"z{N}": Normal(par[_p], 1.0),
                       parents=(f"z{N}",))],
    )
    return m, ProposalGraph.from_prior(m, MP)


def build_ts_multi(N: int = 30, tau: float = 10.0):
    """Mean-reverting chain with an observation at every third step."""
    if N < 2:
        raise ShapeError("N must be at least 2")
    a = 1.0 - 1.0 / tau
    latents = [LatentDecl("z1", lambda par, th: Normal(0.0, 1.0))]
    for i in range(2, N + 1):
        latents.append(LatentDecl(
            f"z{i}",
            lambda par, th, _p=f"z{i - 1}", _a=a: Normal(_a * np.asarray(par[_p]), 2.0 / tau),
            parents=(f"z{i - 1}",),
        ))
    data = []
    for i in range(3, N + 1, 3):
        data.append(DataDecl(
            f"x{i}", lambda par, cov, th, _p=f"z{i}": Normal(par[_p], 1.0), parents=(f"z{i}",)
        ))
    m = ModelGraph(plates={}, latents=latents, data=data)
    return m, ProposalGraph.from_prior(m, MP)


# ---------------------------------------------------------------------------
# data loading and splitting


def load_movielens_ratings(path, M: int, films_per_user: int, rng: np.random.Generator,
                           feature_dim: int = 18) -> Dataset:
    """Load tab-separated (user, item, rating, timestamp) records.

    Ratings 0-3 binarise to 0, 4-5 to 1. Subsamples M users and
    films_per_user rated films per user. Film features come from a
    sibling item file's genre flags when present (first flag dropped to
    give 18 columns), otherwise from per-film seeded standard normals.
    """
    import os

    by_user: dict[int, list] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 tab-separated fields")
            try:
                user, item, rating = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-integer field") from None
            if not 0 <= rating <= 5:
                raise DataError(f"{path}: line {lineno}: rating {rating} out of range")
            by_user.setdefault(user, []).append((item, 1 if rating >= 4 else 0))

    eligible = sorted(u for u, rs in by_user.items() if len(rs) >= films_per_user)
    if len(eligible) < M:
        raise DataError(
            f"only {len(eligible)} users have >= {films_per_user} ratings; need {M}"
        )
    users = rng.choice(np.asarray(eligible), size=M, replace=False)

    genre = {}
    item_path = os.path.join(os.path.dirname(os.path.abspath(path)), "u.item")
    if os.path.exists(item_path):
        with open(item_path, "r", encoding="latin-1") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("|")
                if len(parts) < 20:
                    continue
                flags = [float(v) for v in parts[-19:]]
                genre[int(parts[0])] = np.asarray(flags[1:], dtype=np.float64)

    ratings = np.zeros((M, films_per_user), dtype=np.int64)
    feats = np.zeros((M, films_per_user, feature_dim))
    for ui, u in enumerate(users):
        rows = by_user[int(u)]
        pick = rng.choice(len(rows), size=films_per_user, replace=False)
        for fi, ri in enumerate(pick):
            item, r = rows[ri]
            ratings[ui, fi] = r
            if item in genre and feature_dim == 18:
                feats[ui, fi] = genre[item]
            else:
                frng = np.random.default_rng([7, item])
                feats[ui, fi] = frng.standard_normal(feature_dim)
    return Dataset(observed={"rating": ratings}, covariates={"film_features": feats})


def load_bus_delays(path, M: int = 3, J: int = 3, I: int = 30,
                    n_companies: int = 10, n_journeys: int = 5) -> Dataset:
    """Load comma-separated (year, borough, id, company, journey, delay)
    integer records with a header line; indices are zero-based.
    """
    delays = np.full((M, J, I), -1, dtype=np.int64)
    company = np.zeros((M, J, I), dtype=np.int64)
    journey = np.zeros((M, J, I), dtype=np.int64)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header or any(c.isdigit() for c in header.split(",")[0]):
            raise DataError(f"{path}: line 1: header line required")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise DataError(f"{path}: line {lineno}: expected 6 comma-separated fields")
            try:
                y, b, i, c, j, d = (int(v) for v in parts)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-integer field") from None
            if not (0 <= y < M and 0 <= b < J and 0 <= i < I):
                raise DataError(f"{path}: line {lineno}: index out of range")
            if not (0 <= c < n_companies and 0 <= j < n_journeys and d >= 0):
                raise DataError(f"{path}: line {lineno}: bad covariate or delay")
            if delays[y, b, i] >= 0:
                raise DataError(f"{path}: line {lineno}: duplicate cell ({y},{b},{i})")
            delays[y, b, i] = d
            company[y, b, i] = c
            journey[y, b, i] = j
    if np.any(delays < 0):
        missing = np.argwhere(delays < 0)[0]
        raise DataError(f"{path}: no record for cell {tuple(int(v) for v in missing)}")
    return Dataset(
        observed={"delay": delays},
        covariates={
            "company_onehot": np.eye(n_companies)[company],
            "journey_onehot": np.eye(n_journeys)[journey],
        },
    )


def synthesize_data(m: ModelGraph, truth: dict, rng: np.random.Generator,
                    covariates: dict | None = None) -> Dataset:
    """Fresh observations from given latents (held-out sets share latents)."""
    from .model_graph import grid_parent_values

    cov = {**m.covariates, **(covariates or {})}
    observed = {}
    for decl in m.data:
        parents = grid_parent_values(m, decl, {p: truth[p] for p in decl.parents}, {}, 0, 0)
        dist = decl.builder(parents, cov, m.params)
        observed[decl.name] = dist.sample(rng, m.plate_shape(decl.plates) + decl.event_shape)
    return Dataset(observed=observed, covariates=cov)


# ---------------------------------------------------------------------------
# experiment assembly


@dataclass
class ExperimentSpec:
    """Declarative description of one runnable experiment."""

    name: str
    sizes: dict
    data_source: str = "synthetic"  # "synthetic" or a file path
    test_source: str | None = None
    data_seed: int = 0
    split_seed: int = 0

    def __post_init__(self):
        if any(int(v) <= 0 for v in self.sizes.values() if not isinstance(v, float)):
            raise ShapeError("experiment sizes must be positive")


@dataclass
class Experiment:
    """A built experiment: model, proposal, and train/test datasets."""

    spec: ExperimentSpec
    model: ModelGraph
    proposal: ProposalGraph
    train_data: Dataset
    test_data: Dataset | None


def _split_movielens(ratings, features, J: int, split_seed: int):
    """Permute each user's film slots and cut into equal train/test halves."""
    M, total = ratings.shape
    rng = np.random.default_rng([split_seed, 23])
    idx = rng.permuted(np.broadcast_to(np.arange(total), (M, total)).copy(), axis=1)
    ratings = np.take_along_axis(ratings, idx, axis=1)
    features = np.take_along_axis(features, idx[:, :, None], axis=1)
    train = (ratings[:, :J], features[:, :J])
    test = (ratings[:, J:], features[:, J:])
    return train, test


def _build_movielens_experiment(spec: ExperimentSpec) -> Experiment:
    M = int(spec.sizes.get("users", 50))
    J = int(spec.sizes.get("films_per_user", 5))
    if spec.data_source == "synthetic":
        frng = np.random.default_rng([spec.data_seed, 21])
        features = frng.standard_normal((M, 2 * J, 18))
        m_full, _ = build_movielens(M, 2 * J, features=features)
        _, full = generate_synthetic(m_full, np.random.default_rng([spec.data_seed, 22]))
        ratings = full.observed["rating"]
    else:
        ds = load_movielens_ratings(
            spec.data_source, M, 2 * J, np.random.default_rng([spec.data_seed, 25])
        )
        ratings = ds.observed["rating"]
        features = ds.covariates["film_features"]
    (r_tr, f_tr), (r_te, f_te) = _split_movielens(ratings, features, J, spec.split_seed)
    model, proposal = build_movielens(M, J, features=f_tr)
    train = Dataset(observed={"rating": r_tr}, covariates={"film_features": f_tr})
    test = Dataset(observed={"rating": r_te}, covariates={"film_features": f_te})
    return Experiment(spec, model, proposal, train, test)


def _build_bus_experiment(spec: ExperimentSpec) -> Experiment:
    sizes = dict(
        M=int(spec.sizes.get("years", 3)),
        J=int(spec.sizes.get("boroughs", 3)),
        I=int(spec.sizes.get("ids", 30)),
    )
    if spec.data_source == "synthetic":
        model, proposal = build_bus(**sizes, covariate_seed=spec.data_seed)
        truth, train = generate_synthetic(
            model, np.random.default_rng([spec.data_seed, 31])
        )
        test = synthesize_data(model, truth, np.random.default_rng([spec.data_seed, 32]))
    else:
        train = load_bus_delays(spec.data_source, **sizes)
        model, proposal = build_bus(**sizes, covariates=dict(train.covariates))
        test = load_bus_delays(spec.test_source, **sizes) if spec.test_source else None
    return Experiment(spec, model, proposal, train, test)


def _build_ts_experiment(spec: ExperimentSpec) -> Experiment:
    N = int(spec.sizes.get("N", 30))
    if spec.name == "ts-single":
        model, proposal = build_ts_single(N)
    else:
        model, proposal = build_ts_multi(N, float(spec.sizes.get("tau", 10.0)))
    _, data = generate_synthetic(model, np.random.default_rng([spec.data_seed, 41]))
    return Experiment(spec, model, proposal, data, None)


def make_experiment(name: str, opts: dict | None = None) -> Experiment:
    """Build a named experiment from CLI-style options."""
    opts = opts or {}

    def get(key, default):
        return opts.get(key, default)

    spec = ExperimentSpec(
        name=name,
        sizes={
            "users": get("users", 50),
            "films_per_user": get("films-per-user", 5),
            "years": get("years", 3),
            "boroughs": get("boroughs", 3),
            "ids": get("ids", 30),
            "N": get("N", 30),
            "tau": get("tau", 10.0),
        },
        data_source=get("data", None) or "synthetic",
        test_source=get("test-data", None),
        data_seed=int(get("data-seed", 0)),
        split_seed=int(get("split-seed", 0)),
    )
    if name == "movielens":
        return _build_movielens_experiment(spec)
    if name == "bus":
        return _build_bus_experiment(spec)
    if name in ("ts-single", "ts-multi"):
        return _build_ts_experiment(spec)
    raise ShapeError(f"unknown experiment {name!r}")


# ---------------------------------------------------------------------------
# predictive likelihood


def predictive_log_likelihood(
    m: ModelGraph, q: ProposalGraph, batch: SampleBatch, fs, test_data: Dataset
) -> float:
    """Posterior-weighted predictive density of held-out data.

    Computed as the difference of two contractions sharing the batch: one
    over train factors plus held-out likelihood factors, one over the
    train factors alone.
    """
    if all(np.asarray(v).size == 0 for v in test_data.observed.values()):
        return 0.0
    base = execute(fs.plan(), fs.factors)
    if not np.isfinite(base):
        raise DegenerateEvidenceError("training evidence is zero; weights undefined")
    tf, _, _ = build_data_factors(m, batch, test_data, rename_free_plates="__test")
    combined = fs.factors + tf
    plan = _cached_plan([f.axes for f in combined])
    return execute(plan, combined) - base


def predictive_log_likelihood_global(
    m: ModelGraph, q: ProposalGraph, batch: SampleBatch, train_data: Dataset,
    test_data: Dataset,
) -> float:
    """Global-batch analogue: log sum_k w_k P(held-out | particle k)."""
    if all(np.asarray(v).size == 0 for v in test_data.observed.values()):
        return 0.0
    log_r, w = global_log_weights(m, q, batch, train_data)
    test_ll = np.zeros(batch.K)
    covariates = {**m.covariates, **test_data.covariates}
    from .model_graph import align_to_plates

    for decl in m.data:
        aligned = {
            j: align_to_plates(batch.values[j], m.latent(j).plates, decl.plates, lead_ndim=1)
            for j in decl.parents
        }
        dist = decl.builder(aligned, covariates, m.params)
        lp = dist.log_prob(np.asarray(test_data.observed[decl.name]))
        obs_plates = np.asarray(test_data.observed[decl.name]).shape[: len(decl.plates)]
        lp = np.broadcast_to(lp, (batch.K,) + obs_plates)
        test_ll = test_ll + lp.reshape(batch.K, -1).sum(axis=1)
    mx = test_ll.max()
    if not np.isfinite(mx):
        return -np.inf
    return float(np.log((w * np.exp(test_ll - mx)).sum()) + mx)


# ---------------------------------------------------------------------------
# exact oracles


def _gaussian_affine(builder, parent_name, params):
    """(slope, intercept, variance) of a conditionally linear-Gaussian node."""
    points = np.array([-1.0, 0.0, 1.0, 2.5])
    means, vars_ = [], []
    for v in points:
        dist = builder({parent_name: np.asarray(v)} if parent_name else {}, params)
        if not isinstance(dist, Normal) or dist.event_ndim:
            raise CapabilityError("oracle requires scalar Normal nodes")
        means.append(float(np.asarray(dist.mean)))
        vars_.append(float(np.asarray(dist.var)))
    means = np.asarray(means)
    if np.ptp(vars_) > 1e-12:
        raise CapabilityError("oracle requires parent-independent variances")
    slope = (means[2] - means[0]) / 2.0
    intercept = means[1]
    fit = slope * points + intercept
    if np.max(np.abs(fit - means)) > 1e-9:
        raise CapabilityError("oracle requires affine conditional means")
    return slope, intercept, vars_[1]


def _gaussian_chain_log_evidence(m: ModelGraph, data: Dataset) -> float:
    from .errors import StructureError
    from .estimator import chain_structure

    try:
        order, obs_at = chain_structure(m)
    except StructureError as exc:
        raise CapabilityError(f"oracle requires a chain model: {exc}") from None
    covariates = {**m.covariates, **data.covariates}
    mean = var = None
    total = 0.0
    for decl in m.latents:
        parent = decl.parents[0] if decl.parents else None
        a, b, qv = _gaussian_affine(lambda par, th: decl.builder(par, th), parent, m.params)
        if parent is None:
            mean, var = b, qv
        else:
            mean, var = a * mean + b, a * a * var + qv
        for ddecl in obs_at[decl.name]:
            c, d, rv = _gaussian_affine(
                lambda par, th: ddecl.builder(par, covariates, th), ddecl.parents[0], m.params
            )
            x = float(np.asarray(data.observed[ddecl.name]))
            pred_var = c * c * var + rv
            total += float(Normal(c * mean + d, pred_var).log_prob(x))
            gain = var * c / pred_var
            mean = mean + gain * (x - (c * mean + d))
            var = var - gain * c * var
    return total


def _enumerate_log_evidence(m: ModelGraph, data: Dataset) -> float:
    from itertools import product

    from .model_graph import log_joint

    if any(l.plates for l in m.latents):
        raise CapabilityError("enumeration oracle requires a plate-free model")
    supports = []
    for l in m.latents:
        if not isinstance(l.support, int):
            raise CapabilityError(f"latent {l.name!r} is not discrete")
        supports.append(range(l.support))
    total = 0.0
    terms = []
    for combo in product(*supports):
        terms.append(log_joint(m, {l.name: np.asarray(v) for l, v in zip(m.latents, combo)}, data))
    terms = np.asarray(terms)
    mx = terms.max()
    if not np.isfinite(mx):
        return -np.inf
    return float(np.log(np.exp(terms - mx).sum()) + mx)


def exact_log_evidence(m: ModelGraph, data: Dataset) -> float:
    """Exact log P(data): enumeration for fully discrete plate-free models,
    sequential Gaussian marginalisation for linear-Gaussian chains.
    """
    if all(isinstance(l.support, int) for l in m.latents):
        return _enumerate_log_evidence(m, data)
    return _gaussian_chain_log_evidence(m, data)
