"""Declarative generative models: latents, plates, parents, data factors.

A model is a list of latent declarations (in topological order), a list of
data declarations, named plates, and a store of unconstrained parameters.
Each declaration carries a `builder` callable that maps parent values (and
covariates, for data) to a Distribution; builders must be broadcast-safe,
because the same builder is called with plain per-member values (ancestral
sampling), with a leading particle axis (joint sampling), or with one grid
axis per parent particle set (factor tensors). Parent and covariate arrays
are right-aligned: particle axes lead, then the declaration's plates, then
event dimensions.

A latent inside a plate is a batch of conditionally independent latents
sharing one K-axis label; parents must live in enclosing (or equal) plate
sets, so every factor's plate axes are exactly its declaration's plates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GraphError, ShapeError
from .params import ParamStore

REAL = "real"


@dataclass
class LatentDecl:
    """One latent variable (or plate-batch of them)."""

    name: str
    builder: Callable  # (parents: dict[str, array], params: ParamStore) -> Distribution
    parents: tuple[str, ...] = ()
    plates: tuple[str, ...] = ()
    event_shape: tuple[int, ...] = ()
    support: object = REAL  # REAL or an integer support size for discrete latents


@dataclass
class DataDecl:
    """One observed variable with its likelihood."""

    name: str
    builder: Callable  # (parents, covariates: dict, params) -> Distribution
    parents: tuple[str, ...] = ()
    plates: tuple[str, ...] = ()
    event_shape: tuple[int, ...] = ()


@dataclass
class Dataset:
    """Observed arrays per data declaration plus covariate arrays."""

    observed: dict[str, np.ndarray]
    covariates: dict[str, np.ndarray] = field(default_factory=dict)


class ModelGraph:
    """A validated generative model with parameters theta."""

    def __init__(
        self,
        plates: dict[str, int] | None,
        latents: list[LatentDecl],
        data: list[DataDecl],
        params: ParamStore | None = None,
        covariates: dict | None = None,
    ):
        self.plates = dict(plates or {})
        self.latents = list(latents)
        self.data = list(data)
        self.params = params if params is not None else ParamStore()
        self.covariates = {k: np.asarray(v) for k, v in (covariates or {}).items()}
        self._by_name = {l.name: l for l in self.latents}
        validate(self)

    def latent(self, name: str) -> LatentDecl:
        return self._by_name[name]

    def plate_shape(self, plates: tuple[str, ...]) -> tuple[int, ...]:
        return tuple(self.plates[p] for p in plates)


def validate(m: ModelGraph) -> list[str]:
    """Check structural invariants; return the latent topological order.

    Declaration order must itself be topological; cycles, undeclared
    parents, and cross-plate parents raise GraphError naming the offence.
    """
    names = [l.name for l in m.latents]
    if len(set(names)) != len(names):
        raise GraphError("duplicate latent names")
    plate_index = {p: i for i, p in enumerate(m.plates)}
    declared = set()
    by_name = {l.name: l for l in m.latents}

    # true cycle detection first, so mutual dependence reports as a cycle
    state: dict[str, int] = {}

    def visit(name, stack):
        if state.get(name) == 2:
            return
        if state.get(name) == 1:
            cycle = stack[stack.index(name):] + [name]
            raise GraphError("dependency cycle among latents: " + " -> ".join(cycle))
        state[name] = 1
        for p in by_name[name].parents:
            if p in by_name:
                visit(p, stack + [name])
        state[name] = 2

    for l in m.latents:
        visit(l.name, [])

    for decl in list(m.latents) + list(m.data):
        for p in decl.plates:
            if p not in m.plates:
                raise GraphError(f"{decl.name!r} uses undeclared plate {p!r}")
        if list(decl.plates) != sorted(decl.plates, key=plate_index.__getitem__):
            raise GraphError(f"{decl.name!r} lists plates out of declaration order")
        for parent in decl.parents:
            if parent not in by_name:
                raise GraphError(f"{decl.name!r} has undeclared parent {parent!r}")
            pdecl = by_name[parent]
            if not set(pdecl.plates) <= set(decl.plates):
                raise GraphError(
                    f"cross-plate parent: {decl.name!r} (plates {decl.plates}) "
                    f"<- {parent!r} (plates {pdecl.plates})"
                )
        if isinstance(decl, LatentDecl):
            for parent in decl.parents:
                if parent not in declared:
                    raise GraphError(
                        f"edge {parent!r} -> {decl.name!r} breaks declaration order"
                    )
            declared.add(decl.name)
    return names


def align_to_plates(values, own_plates, decl_plates, lead_ndim: int = 0):
    """Insert singleton axes so `values` broadcasts over `decl_plates`.

    `values` has `lead_ndim` leading particle axes, then `own_plates`, then
    event dims; `own_plates` must be an ordered subset of `decl_plates`.
    """
    values = np.asarray(values)
    if tuple(own_plates) == tuple(decl_plates):
        return values
    shape = list(values.shape[:lead_ndim])
    rest = list(values.shape[lead_ndim:])
    it = iter(own_plates)
    own = set(own_plates)
    nxt = next(it, None)
    for p in decl_plates:
        if p == nxt:
            shape.append(rest.pop(0))
            nxt = next(it, None)
        elif p in own:
            raise ShapeError(f"plates {own_plates} are not an ordered subset of {decl_plates}")
        else:
            shape.append(1)
    shape.extend(rest)  # event dims
    return values.reshape(shape)


def grid_parent_values(m_or_sizes, decl, parent_values: dict, k_positions: dict, n_k: int, K: int):
    """Align parent particle arrays onto a particle grid.

    Each parent j with values of shape (K, *plates(j), *event) is viewed
    with its particle axis at grid position `k_positions[j]` (singletons at
    the other n_k grid axes) and its plates aligned to `decl.plates`.
    Parents absent from `k_positions` are taken as already sharing the
    leading axis layout (pre-gathered values).
    """
    by_name = m_or_sizes._by_name if isinstance(m_or_sizes, ModelGraph) else m_or_sizes
    out = {}
    for j, v in parent_values.items():
        pdecl = by_name[j]
        v = np.asarray(v)
        if j in k_positions:
            pos = k_positions[j]
            lead = [1] * n_k
            lead[pos] = K
            v = v.reshape(tuple(lead) + v.shape[1:])
            out[j] = align_to_plates(v, pdecl.plates, decl.plates, lead_ndim=n_k)
        else:
            out[j] = align_to_plates(v, pdecl.plates, decl.plates, lead_ndim=n_k)
    return out


def generate_synthetic(m: ModelGraph, rng: np.random.Generator):
    """Ancestral sampling of ground-truth latents and a synthetic Dataset."""
    truth: dict[str, np.ndarray] = {}
    for decl in m.latents:
        parents = grid_parent_values(m, decl, {p: truth[p] for p in decl.parents}, {}, 0, 0)
        dist = decl.builder(parents, m.params)
        truth[decl.name] = dist.sample(rng, m.plate_shape(decl.plates) + decl.event_shape)
    observed = {}
    for decl in m.data:
        parents = grid_parent_values(m, decl, {p: truth[p] for p in decl.parents}, {}, 0, 0)
        dist = decl.builder(parents, m.covariates, m.params)
        observed[decl.name] = dist.sample(rng, m.plate_shape(decl.plates) + decl.event_shape)
    return truth, Dataset(observed=observed, covariates=dict(m.covariates))


def log_joint(m: ModelGraph, assignment: dict, data: Dataset) -> float:
    """Sum of all prior and likelihood log-densities at a single assignment."""
    total = 0.0
    covariates = {**m.covariates, **data.covariates}
    for decl in m.latents:
        if decl.name not in assignment:
            raise GraphError(f"assignment is missing latent {decl.name!r}")
        parents = grid_parent_values(
            m, decl, {p: assignment[p] for p in decl.parents}, {}, 0, 0
        )
        dist = decl.builder(parents, m.params)
        lp = dist.log_prob(np.asarray(assignment[decl.name], dtype=np.float64))
        total += float(np.sum(np.broadcast_to(lp, m.plate_shape(decl.plates))))
    for decl in m.data:
        parents = grid_parent_values(
            m, decl, {p: assignment[p] for p in decl.parents}, {}, 0, 0
        )
        dist = decl.builder(parents, covariates, m.params)
        lp = dist.log_prob(np.asarray(data.observed[decl.name]))
        total += float(np.sum(np.broadcast_to(lp, m.plate_shape(decl.plates))))
    return total
