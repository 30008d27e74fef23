"""Factor tensors and marginal-likelihood estimators.

From a sample batch, each latent i contributes two log factors: the prior
conditional evaluated on the particle grid (axes k_i, k_pa(i), plates) and
the negated proposal marginal (axes k_i, plates); each data declaration
contributes its likelihood grid (axes k_pa(x), plates). Contracting all of
them with mean-reductions over K-axes and products over plates yields the
massively parallel evidence estimate: the log of the average importance
ratio over every one of the K^n particle-index combinations, without ever
materialising the K^n ratios.

The global estimator averages K whole-joint importance ratios instead, and
a bootstrap particle filter provides the classic baseline for chains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StructureError
from .log_tensor import (
    ContractionPlan,
    LogFactor,
    Weights,
    _logmeanexp,
    execute,
    execute_with_marginals,
    k_axis,
    log_mul,
    plan_contraction,
    plate_axis,
)
from .model_graph import Dataset, ModelGraph, align_to_plates
from .proposals import GLOBAL, ProposalGraph, SampleBatch

PRIOR = "prior"
PROPOSAL = "proposal"
LIKELIHOOD = "likelihood"

_plan_cache: dict = {}


def _cached_plan(signatures) -> ContractionPlan:
    key = tuple(tuple(sig) for sig in signatures)
    plan = _plan_cache.get(key)
    if plan is None:
        if len(_plan_cache) > 256:
            _plan_cache.clear()
        plan = plan_contraction(key)
        _plan_cache[key] = plan
    return plan


@dataclass
class FactorMeta:
    role: str
    name: str
    k_order: tuple[str, ...]  # latent names owning the leading grid axes


@dataclass
class FactorSet:
    """Contraction-ready factors plus what gradient passes need.

    `grids[j]`, present for prior and likelihood factors, holds the grid
    Distribution and the value array it was evaluated at.
    """

    factors: list[LogFactor]
    meta: list[FactorMeta]
    grids: dict[int, tuple]
    K: int

    def index(self, role: str, name: str) -> int:
        for i, m in enumerate(self.meta):
            if m.role == role and m.name == name:
                return i
        raise LookupError(f"no {role} factor named {name!r}")

    def latent_factor(self, name: str) -> LogFactor:
        """Combined tensor for one latent: log prior minus log marginal q."""
        return log_mul(
            self.factors[self.index(PRIOR, name)],
            self.factors[self.index(PROPOSAL, name)],
        )

    def data_factor(self, name: str) -> LogFactor:
        return self.factors[self.index(LIKELIHOOD, name)]

    @property
    def signatures(self):
        return [f.axes for f in self.factors]

    def plan(self) -> ContractionPlan:
        return _cached_plan(self.signatures)


@dataclass
class EvidenceEstimate:
    """A log marginal-likelihood estimate plus its contraction artifacts."""

    log_evidence: float
    kind: str
    factor_set: FactorSet | None = None
    log_ratios: np.ndarray | None = None  # global kind: per-particle log r_k


def _prior_grid(m: ModelGraph, batch: SampleBatch, decl):
    """Distribution and own-value view on the (k_i, k_pa...) particle grid."""
    K = batch.K
    r = len(decl.parents)
    aligned = {}
    for t, j in enumerate(decl.parents):
        v = np.asarray(batch.values[j])
        lead = [1] * (1 + r)
        lead[1 + t] = K
        v = v.reshape(tuple(lead) + v.shape[1:])
        aligned[j] = align_to_plates(v, m.latent(j).plates, decl.plates, lead_ndim=1 + r)
    dist = decl.builder(aligned, m.params)
    own = np.asarray(batch.values[decl.name])
    own = own.reshape((K,) + (1,) * r + own.shape[1:])
    return dist, own


def _likelihood_grid(m: ModelGraph, batch: SampleBatch, decl, data: Dataset, plate_sizes):
    K = batch.K
    r = len(decl.parents)
    aligned = {}
    for t, j in enumerate(decl.parents):
        v = np.asarray(batch.values[j])
        lead = [1] * r
        lead[t] = K
        v = v.reshape(tuple(lead) + v.shape[1:])
        aligned[j] = align_to_plates(v, m.latent(j).plates, decl.plates, lead_ndim=r)
    covariates = {**m.covariates, **data.covariates}
    dist = decl.builder(aligned, covariates, m.params)
    obs = np.asarray(data.observed[decl.name])
    expected = tuple(plate_sizes[p] for p in decl.plates) + decl.event_shape
    if obs.shape != expected:
        raise ShapeError(
            f"observed {decl.name!r} has shape {obs.shape}, plates require {expected}"
        )
    return dist, obs


def _latent_bound_plates(m: ModelGraph) -> set:
    return {p for l in m.latents for p in l.plates}


def build_data_factors(
    m: ModelGraph,
    batch: SampleBatch,
    data: Dataset,
    rename_free_plates: str = "",
):
    """Likelihood factors for one dataset against an existing batch.

    Plate sizes are read off the observed arrays; plates carrying latents
    must match the model's sizes, while data-only plates may differ (held
    out sets) and get `rename_free_plates` appended to their axis name so
    train and test factors can share one contraction.
    """
    bound = _latent_bound_plates(m)
    factors, metas, grids = [], [], []
    for decl in m.data:
        obs = np.asarray(data.observed[decl.name])
        if obs.ndim < len(decl.plates):
            raise ShapeError(f"observed {decl.name!r} has too few axes for its plates")
        plate_sizes = {}
        for i, p in enumerate(decl.plates):
            size = obs.shape[i]
            if p in bound and size != m.plates[p]:
                raise ShapeError(
                    f"plate {p!r} of {decl.name!r} has size {size}, model declares {m.plates[p]}"
                )
            plate_sizes[p] = size
        dist, obs = _likelihood_grid(m, batch, decl, data, plate_sizes)
        lp = dist.log_prob(obs)
        k_order = tuple(decl.parents)
        axes = tuple(
            k_axis(f"k_{j}", batch.K, plates=m.latent(j).plates) for j in k_order
        ) + tuple(
            plate_axis(p if p in bound else p + rename_free_plates, plate_sizes[p])
            for p in decl.plates
        )
        lp = np.broadcast_to(lp, tuple(a.size for a in axes))
        factors.append(LogFactor(axes, lp, validate=False))
        metas.append(FactorMeta(LIKELIHOOD, decl.name, k_order))
        grids.append((dist, obs))
    return factors, metas, grids


def build_factors(
    m: ModelGraph, batch: SampleBatch, data: Dataset, proposal: ProposalGraph | None = None
) -> FactorSet:
    """Evaluate all prior, proposal, and likelihood tensors for one batch.

    When `proposal` is the model's own prior (borrowed conditionals with
    matching parent sets), the conditional grids stored during sampling
    are reused as the prior tensors instead of being re-evaluated.
    """
    if set(batch.values) != {l.name for l in m.latents}:
        raise ShapeError("batch latents do not match the model's latents")
    reuse = (
        proposal is not None
        and getattr(proposal, "borrows_prior", False)
        and batch.kind != GLOBAL
    )
    K = batch.K
    factors: list[LogFactor] = []
    metas: list[FactorMeta] = []
    grids: dict[int, tuple] = {}
    for decl in m.latents:
        plate_shape = m.plate_shape(decl.plates)
        v = np.asarray(batch.values[decl.name])
        if v.shape != (K,) + plate_shape + decl.event_shape:
            raise ShapeError(
                f"particles for {decl.name!r} have shape {v.shape}, expected "
                f"{(K,) + plate_shape + decl.event_shape}"
            )
        k_order = (decl.name,) + tuple(decl.parents)
        axes = tuple(
            k_axis(f"k_{j}", K, plates=m.latent(j).plates) for j in k_order
        ) + tuple(plate_axis(p, m.plates[p]) for p in decl.plates)
        if reuse and decl.name in batch.cond_grids:
            lp = batch.cond_grids[decl.name]
            grids[len(factors)] = None  # rebuild on demand for gradient passes
        else:
            dist, own = _prior_grid(m, batch, decl)
            lp = dist.log_prob(own)
            grids[len(factors)] = (dist, own)
        lp = np.broadcast_to(lp, tuple(a.size for a in axes))
        factors.append(LogFactor(axes, lp, validate=False))
        metas.append(FactorMeta(PRIOR, decl.name, k_order))

        marg = batch.marginal_logq.get(decl.name)
        if marg is None:
            raise ShapeError(
                f"batch carries no proposal marginal for {decl.name!r} "
                "(global batches only store marginals for parent-free latents)"
            )
        factors.append(LogFactor(marg.axes, -marg.values, validate=False))
        metas.append(FactorMeta(PROPOSAL, decl.name, (decl.name,)))

    dfactors, dmetas, dgrids = build_data_factors(m, batch, data)
    for f, meta, grid in zip(dfactors, dmetas, dgrids):
        grids[len(factors)] = grid
        factors.append(f)
        metas.append(meta)
    return FactorSet(factors, metas, grids, K)


def log_evidence_mp(fs: FactorSet) -> EvidenceEstimate:
    """Massively parallel estimate: contract every factor to a scalar."""
    value = execute(fs.plan(), fs.factors)
    return EvidenceEstimate(value, "mp", factor_set=fs)


def factor_weights(fs: FactorSet):
    """Evidence plus posterior weights for every factor's index cells."""
    return execute_with_marginals(fs.plan(), fs.factors)


def posterior_marginal(fs: FactorSet, role: str, name: str) -> Weights:
    """Posterior weights over one factor's axes (self-normalised)."""
    idx = fs.index(role, name)
    _, weights = factor_weights(fs)
    return Weights(fs.factors[idx].axes, weights[idx])


def _global_log_joint(m: ModelGraph, batch: SampleBatch, data: Dataset) -> np.ndarray:
    K = batch.K
    total = np.zeros(K)
    for decl in m.latents:
        aligned = {
            j: align_to_plates(batch.values[j], m.latent(j).plates, decl.plates, lead_ndim=1)
            for j in decl.parents
        }
        dist = decl.builder(aligned, m.params)
        lp = dist.log_prob(np.asarray(batch.values[decl.name]))
        lp = np.broadcast_to(lp, (K,) + m.plate_shape(decl.plates))
        total = total + lp.reshape(K, -1).sum(axis=1)
    covariates = {**m.covariates, **data.covariates}
    for decl in m.data:
        aligned = {
            j: align_to_plates(batch.values[j], m.latent(j).plates, decl.plates, lead_ndim=1)
            for j in decl.parents
        }
        dist = decl.builder(aligned, covariates, m.params)
        lp = dist.log_prob(np.asarray(data.observed[decl.name]))
        obs_plates = np.asarray(data.observed[decl.name]).shape[: len(decl.plates)]
        lp = np.broadcast_to(lp, (K,) + obs_plates)
        total = total + lp.reshape(K, -1).sum(axis=1)
    return total


def _global_data_loglik(m: ModelGraph, batch: SampleBatch, data: Dataset) -> np.ndarray:
    K = batch.K
    total = np.zeros(K)
    covariates = {**m.covariates, **data.covariates}
    for decl in m.data:
        aligned = {
            j: align_to_plates(batch.values[j], m.latent(j).plates, decl.plates, lead_ndim=1)
            for j in decl.parents
        }
        dist = decl.builder(aligned, covariates, m.params)
        lp = dist.log_prob(np.asarray(data.observed[decl.name]))
        obs_plates = np.asarray(data.observed[decl.name]).shape[: len(decl.plates)]
        lp = np.broadcast_to(lp, (K,) + obs_plates)
        total = total + lp.reshape(K, -1).sum(axis=1)
    return total


def log_evidence_global(
    m: ModelGraph, q: ProposalGraph, batch: SampleBatch, data: Dataset
) -> EvidenceEstimate:
    """Average of K whole-joint importance ratios, in log space.

    When the proposal borrows the prior, the latent prior and proposal
    terms cancel pointwise and only data likelihood terms are evaluated.
    """
    if batch.kind != GLOBAL or batch.joint_logq is None:
        raise ShapeError("log_evidence_global requires a batch from sample_global")
    if getattr(q, "borrows_prior", False):
        log_r = _global_data_loglik(m, batch, data)
    else:
        log_r = _global_log_joint(m, batch, data) - batch.joint_logq
    value = float(_logmeanexp(log_r[None, :], 1, np.log(batch.K))[0])
    return EvidenceEstimate(value, "global", log_ratios=log_r)


def chain_structure(m: ModelGraph):
    """Latent order and per-latent observation lists for a chain model.

    Raises StructureError unless every latent is plate-free with its
    parents contained in {previous latent} and every data declaration
    hangs off exactly one latent.
    """
    order = [l.name for l in m.latents]
    for i, l in enumerate(m.latents):
        if l.plates:
            raise StructureError(f"latent {l.name!r} lives in a plate; not a chain")
        allowed = {order[i - 1]} if i > 0 else set()
        if not set(l.parents) <= allowed:
            raise StructureError(
                f"latent {l.name!r} has parents {l.parents}; a chain allows {tuple(allowed)}"
            )
    obs_at: dict[str, list] = {name: [] for name in order}
    for d in m.data:
        if d.plates or len(d.parents) != 1 or d.parents[0] not in obs_at:
            raise StructureError(f"data {d.name!r} is not a single-parent chain observation")
        obs_at[d.parents[0]].append(d)
    return order, obs_at


def smc_log_evidence(
    m: ModelGraph, K: int, rng: np.random.Generator, data: Dataset
) -> float:
    """Bootstrap particle filter evidence for a chain model.

    Propagates K particles through the prior, weights with the likelihood
    at each observation step, multinomial-resamples after each weighting,
    and returns the sum of log-mean weights.
    """
    order, obs_at = chain_structure(m)
    covariates = {**m.covariates, **data.covariates}
    total = 0.0
    particles: np.ndarray | None = None
    prev: str | None = None
    for decl in m.latents:
        parents = {}
        if decl.parents:
            parents[prev] = particles
        dist = decl.builder(parents, m.params)
        particles = dist.sample(rng, (K,) + decl.event_shape)
        for ddecl in obs_at[decl.name]:
            ddist = ddecl.builder({ddecl.parents[0]: particles}, covariates, m.params)
            logw = np.broadcast_to(ddist.log_prob(np.asarray(data.observed[ddecl.name])), (K,))
            total += float(_logmeanexp(logw[None, :], 1, np.log(K))[0])
            mx = logw.max()
            if not np.isfinite(mx):
                return -np.inf
            w = np.exp(logw - mx)
            idx = rng.choice(K, size=K, p=w / w.sum())
            particles = particles[idx]
        prev = decl.name
    return total
