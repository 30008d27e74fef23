"""Proposal graphs and the three particle-sampling schemes.

* Global: K independent draws of the full joint; particle k of every
  latent conditions on particle k of its proposal parents.
* TMC: per latent, K IID draws, each first picking one particle of every
  parent uniformly at random.
* MP (permutation-coupled): per (latent, parent, plate member) a uniform
  permutation matches each child particle to exactly one parent particle,
  so no parent is orphaned; the single-particle marginal law is unchanged.

For TMC and MP batches, the density stored per particle is always the
uniform-mixture marginal over parent particle combinations (never the
coupled joint); that is what makes the per-combination importance ratios
well defined. Computing it costs one K^(1+|parents|) grid per latent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GraphError, ShapeError
from .log_tensor import LogFactor, _logmeanexp, k_axis, plate_axis
from .model_graph import ModelGraph, align_to_plates
from .params import ParamStore

GLOBAL = "global"
TMC = "tmc"
MP = "mp"

KINDS = (GLOBAL, TMC, MP)


@dataclass
class ProposalDecl:
    """Conditional proposal family for one latent; parents are qa(i)."""

    name: str
    builder: Callable  # (parents: dict[str, array], params: ParamStore) -> Distribution
    parents: tuple[str, ...] = ()


class ProposalGraph:
    """Per-latent proposal families over the latents of a ModelGraph.

    The proposal's parent structure qa(i) may differ from the model's
    pa(i), but must respect the model's latent order and plate nesting.
    """

    def __init__(self, model: ModelGraph, decls: list[ProposalDecl], params: ParamStore, kind: str):
        if kind not in KINDS:
            raise GraphError(f"unknown proposal kind {kind!r}; expected one of {KINDS}")
        self.model = model
        self.decls = list(decls)
        self.params = params
        self.kind = kind
        self.borrows_prior = False
        model_names = [l.name for l in model.latents]
        if [d.name for d in self.decls] != model_names:
            raise GraphError("proposal must declare exactly the model's latents, in order")
        self._by_name = {d.name: d for d in self.decls}
        earlier: set[str] = set()
        for d in self.decls:
            mdecl = model.latent(d.name)
            for p in d.parents:
                if p not in self._by_name:
                    raise GraphError(f"proposal for {d.name!r} names undeclared parent {p!r}")
                if p not in earlier:
                    raise GraphError(
                        f"proposal edge {p!r} -> {d.name!r} breaks the latent order"
                    )
                pdecl = model.latent(p)
                if not set(pdecl.plates) <= set(mdecl.plates):
                    raise GraphError(
                        f"cross-plate proposal parent: {d.name!r} <- {p!r}"
                    )
            earlier.add(d.name)

    def with_kind(self, kind: str) -> "ProposalGraph":
        q = ProposalGraph(self.model, self.decls, self.params, kind)
        q.borrows_prior = self.borrows_prior
        return q

    @classmethod
    def from_prior(cls, model: ModelGraph, kind: str = MP) -> "ProposalGraph":
        """Use the model's own conditionals (and theta, read-only) as the proposal."""
        decls = []
        for l in model.latents:
            def builder(parents, _params, _b=l.builder, _theta=model.params):
                return _b(parents, _theta)

            decls.append(ProposalDecl(l.name, builder, l.parents))
        q = cls(model, decls, ParamStore(), kind)
        q.borrows_prior = True
        return q


@dataclass
class SampleBatch:
    """K particles per latent plus the per-particle proposal log-densities.

    `marginal_logq[i]` is a LogFactor over (k_i, plates(i)): the mixture
    marginal for TMC/MP, the plain conditional for parent-free latents.
    Global batches store `joint_logq` (one joint density per particle) and
    marginals only for parent-free latents.
    `parent_choices[i][j]` records which particle of parent j produced
    each draw of latent i (for MP these rows are permutations).
    """

    kind: str
    K: int
    values: dict[str, np.ndarray]
    marginal_logq: dict[str, LogFactor]
    joint_logq: np.ndarray | None = None
    parent_choices: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    # conditional proposal grids over (k_i, k_qa(i)..., plates); when the
    # proposal borrows the prior these double as the prior factor values
    cond_grids: dict[str, np.ndarray] = field(default_factory=dict)

    def k_axis_for(self, model: ModelGraph, name: str):
        decl = model.latent(name)
        return k_axis(f"k_{name}", self.K, plates=decl.plates)


def _plate_axes(model: ModelGraph, plates: tuple[str, ...]):
    return tuple(plate_axis(p, model.plates[p]) for p in plates)


def _gather(parent_values: np.ndarray, idx: np.ndarray, parent_plates, decl_plates, model):
    """parent value of the chosen particle, per (child particle, member).

    parent_values: (K, *plates(parent), *event); idx: (K, *plate_shape(decl)).
    Members of plates the parent lacks share its value at the chosen index.
    """
    coords = []
    decl_list = list(decl_plates)
    for p in parent_plates:
        pos = decl_list.index(p)
        shape = [1] * (1 + len(decl_list))
        shape[1 + pos] = model.plates[p]
        coords.append(np.arange(model.plates[p]).reshape(shape))
    return parent_values[(idx, *coords)]


def mixture_log_density(q: ProposalGraph, name: str, values: np.ndarray, parent_values: dict):
    """Uniform-mixture marginal log-density of K particles of one latent.

    Entry k_i is log[(1/K^s) sum over parent particle tuples of the
    conditional density], computed by log-mean-exp per parent axis.
    Returns (LogFactor over (k_i, plates), conditional grid, grid dist);
    the grid carries one axis per proposal parent for responsibility
    computations.
    """
    model = q.model
    decl = q._by_name[name]
    mdecl = model.latent(name)
    K = values.shape[0]
    s = len(decl.parents)
    aligned = {}
    for t, j in enumerate(decl.parents):
        v = np.asarray(parent_values[j])
        lead = [1] * (1 + s)
        lead[1 + t] = K
        v = v.reshape(tuple(lead) + v.shape[1:])
        aligned[j] = align_to_plates(v, model.latent(j).plates, mdecl.plates, lead_ndim=1 + s)
    dist = decl.builder(aligned, q.params)
    own = values.reshape((K,) + (1,) * s + values.shape[1:])
    grid = dist.log_prob(own)
    grid = np.broadcast_to(
        grid, (K,) * (1 + s) + model.plate_shape(mdecl.plates)
    )
    out = grid
    for t in range(s, 0, -1):
        out = _logmeanexp(out, t, np.log(K))
    axes = (k_axis(f"k_{name}", K, plates=mdecl.plates),) + _plate_axes(model, mdecl.plates)
    return LogFactor(axes, out, validate=False), grid, dist


def _sample_shape(model, mdecl, K):
    return (K,) + model.plate_shape(mdecl.plates) + mdecl.event_shape


def sample_global(q: ProposalGraph, rng: np.random.Generator, K: int) -> SampleBatch:
    """K independent ancestral draws of the full joint proposal."""
    model = q.model
    values: dict[str, np.ndarray] = {}
    marginals: dict[str, LogFactor] = {}
    joint = np.zeros(K)
    for decl in q.decls:
        mdecl = model.latent(decl.name)
        parents = {
            j: align_to_plates(values[j], model.latent(j).plates, mdecl.plates, lead_ndim=1)
            for j in decl.parents
        }
        dist = decl.builder(parents, q.params)
        v = dist.sample(rng, _sample_shape(model, mdecl, K))
        lp = dist.log_prob(v)
        lp = np.broadcast_to(lp, (K,) + model.plate_shape(mdecl.plates))
        joint = joint + lp.reshape(K, -1).sum(axis=1)
        values[decl.name] = v
        if not decl.parents:
            axes = (k_axis(f"k_{decl.name}", K, plates=mdecl.plates),) + _plate_axes(
                model, mdecl.plates
            )
            marginals[decl.name] = LogFactor(axes, lp, validate=False)
    return SampleBatch(GLOBAL, K, values, marginals, joint_logq=joint)


def _sample_coupled(q: ProposalGraph, rng: np.random.Generator, K: int, kind: str) -> SampleBatch:
    model = q.model
    values: dict[str, np.ndarray] = {}
    marginals: dict[str, LogFactor] = {}
    choices: dict[str, dict[str, np.ndarray]] = {}
    grids: dict[str, np.ndarray] = {}
    for decl in q.decls:
        mdecl = model.latent(decl.name)
        plate_shape = model.plate_shape(mdecl.plates)
        if decl.parents:
            idx_for: dict[str, np.ndarray] = {}
            gathered = {}
            for j in decl.parents:
                if kind == TMC:
                    idx = rng.integers(0, K, size=(K,) + plate_shape)
                else:
                    base = np.broadcast_to(
                        np.arange(K).reshape((K,) + (1,) * len(plate_shape)),
                        (K,) + plate_shape,
                    ).copy()
                    idx = rng.permuted(base, axis=0) if K > 1 else base
                idx_for[j] = idx
                gathered[j] = _gather(
                    np.asarray(values[j]), idx, model.latent(j).plates, mdecl.plates, model
                )
            choices[decl.name] = idx_for
            dist = decl.builder(gathered, q.params)
            v = dist.sample(rng, _sample_shape(model, mdecl, K))
            values[decl.name] = v
            marginals[decl.name], grid, _ = mixture_log_density(
                q, decl.name, v, {j: values[j] for j in decl.parents}
            )
            grids[decl.name] = grid
        else:
            dist = decl.builder({}, q.params)
            v = dist.sample(rng, _sample_shape(model, mdecl, K))
            values[decl.name] = v
            lp = np.broadcast_to(dist.log_prob(v), (K,) + plate_shape)
            axes = (k_axis(f"k_{decl.name}", K, plates=mdecl.plates),) + _plate_axes(
                model, mdecl.plates
            )
            marginals[decl.name] = LogFactor(axes, lp, validate=False)
            grids[decl.name] = lp
    return SampleBatch(kind, K, values, marginals, parent_choices=choices, cond_grids=grids)


def sample_tmc(q: ProposalGraph, rng: np.random.Generator, K: int) -> SampleBatch:
    """K IID draws per latent from the uniform mixture over parent particles."""
    return _sample_coupled(q, rng, K, TMC)


def sample_mp(q: ProposalGraph, rng: np.random.Generator, K: int) -> SampleBatch:
    """Permutation-coupled draws: each parent particle gets exactly one child."""
    return _sample_coupled(q, rng, K, MP)


def sample_batch(q: ProposalGraph, rng: np.random.Generator, K: int) -> SampleBatch:
    """Dispatch on the proposal's kind."""
    if q.kind == GLOBAL:
        return sample_global(q, rng, K)
    return _sample_coupled(q, rng, K, q.kind)


def refresh_marginals(q: ProposalGraph, batch: SampleBatch) -> SampleBatch:
    """Recompute the stored proposal densities at current parameters.

    Used when parameters changed while the particle values are held fixed
    (finite-difference checks); sampling normally keeps values and stored
    densities consistent by construction.
    """
    model = q.model
    marginals = {}
    joint = np.zeros(batch.K) if batch.kind == GLOBAL else None
    for decl in q.decls:
        mdecl = model.latent(decl.name)
        v = batch.values[decl.name]
        if batch.kind == GLOBAL:
            parents = {
                j: align_to_plates(
                    batch.values[j], model.latent(j).plates, mdecl.plates, lead_ndim=1
                )
                for j in decl.parents
            }
            dist = decl.builder(parents, q.params)
            lp = np.broadcast_to(dist.log_prob(v), (batch.K,) + model.plate_shape(mdecl.plates))
            joint = joint + lp.reshape(batch.K, -1).sum(axis=1)
            if not decl.parents:
                marginals[decl.name] = LogFactor(
                    batch.marginal_logq[decl.name].axes, lp, validate=False
                )
        elif decl.parents:
            marginals[decl.name], _, _ = mixture_log_density(
                q, decl.name, v, {j: batch.values[j] for j in decl.parents}
            )
        else:
            dist = decl.builder({}, q.params)
            lp = np.broadcast_to(dist.log_prob(v), (batch.K,) + model.plate_shape(mdecl.plates))
            marginals[decl.name] = LogFactor(
                batch.marginal_logq[decl.name].axes, lp, validate=False
            )
    return SampleBatch(
        batch.kind, batch.K, batch.values, marginals, joint_logq=joint,
        parent_choices=batch.parent_choices,
    )
