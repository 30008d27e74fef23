"""Wake-sleep style parameter updates, Adam, and the training loop.

Updates are the gradient-of-log-evidence form: the contraction's adjoint
pass yields, for every factor, the self-normalised posterior weight of
each of its index cells, and each update is the weight-matched sum of
closed-form log-density gradients. That equals the importance-weighted
form (weighting per-combination gradients by r/K^n-average-r) without ever
touching the K^n combinations individually. Samples are treated as
constants throughout: nothing is reparameterised.

Model (theta) updates ascend log P-hat; proposal (phi) updates ascend the
posterior-weighted proposal log-density, which is the wake-phase proposal
update. For mixture marginals the phi gradient splits over mixture
components by their responsibilities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CapabilityError, DegenerateEvidenceError, ShapeError
from .estimator import (
    LIKELIHOOD,
    PRIOR,
    PROPOSAL,
    FactorSet,
    build_factors,
    factor_weights,
    log_evidence_global,
    _global_log_joint,
)
from .log_tensor import _logmeanexp
from .model_graph import Dataset, ModelGraph, align_to_plates
from .params import GradientStore, ParamStore
from .proposals import (
    GLOBAL,
    ProposalGraph,
    SampleBatch,
    mixture_log_density,
    sample_batch,
    sample_global,
)


def _route(gstore: GradientStore, dist, x, weight: np.ndarray) -> None:
    """Accumulate weight-matched log-density gradients into store entries."""
    entries = dist.param_entries()
    if not any(key for _, _, key in entries):
        return
    partials = dist.grad_log_prob(x)
    for pname, _value, key in entries:
        if key is None:
            continue
        part = np.asarray(partials[pname])
        w = weight
        if part.ndim > w.ndim:
            w = w.reshape(w.shape + (1,) * (part.ndim - w.ndim))
        gstore.accumulate(key, w * part)


def _phi_gradients(
    q: ProposalGraph, batch: SampleBatch, weights_by_latent: dict[str, np.ndarray]
) -> GradientStore:
    """Wake-phase proposal gradients from per-latent posterior weights.

    `weights_by_latent[i]` has the marginal factor's shape (k_i, plates).
    """
    gphi = GradientStore(q.params)
    model = q.model
    for decl in q.decls:
        V = weights_by_latent[decl.name]
        if decl.parents:
            _, grid, dist = mixture_log_density(
                q, decl.name, batch.values[decl.name],
                {j: batch.values[j] for j in decl.parents},
            )
            s = len(decl.parents)
            lse = grid
            for t in range(s, 0, -1):
                mx = np.max(lse, axis=t, keepdims=True)
                mx_safe = np.where(np.isfinite(mx), mx, 0.0)
                with np.errstate(divide="ignore"):
                    lse = np.log(np.exp(lse - mx_safe).sum(axis=t, keepdims=True)) + mx_safe
            resp = np.exp(grid - np.where(np.isfinite(lse), lse, 0.0))
            resp = np.where(np.isfinite(lse), resp, 0.0)
            w = V.reshape((batch.K,) + (1,) * s + V.shape[1:]) * resp
            own = np.asarray(batch.values[decl.name])
            own = own.reshape((batch.K,) + (1,) * s + own.shape[1:])
            _route(gphi, dist, own, w)
        else:
            dist = decl.builder({}, q.params)
            _route(gphi, dist, np.asarray(batch.values[decl.name]), V)
    return gphi


def _rws_update_impl(m: ModelGraph, q: ProposalGraph, batch: SampleBatch, fs: FactorSet):
    if getattr(q, "borrows_prior", False) and len(m.params):
        raise CapabilityError(
            "cannot train theta while the proposal borrows the prior: the "
            "proposal densities would depend on theta as well"
        )
    logz, weights = factor_weights(fs)  # raises DegenerateEvidenceError on -inf
    gtheta = GradientStore(m.params)
    weights_by_latent: dict[str, np.ndarray] = {}
    for idx, meta in enumerate(fs.meta):
        if meta.role == PROPOSAL:
            weights_by_latent[meta.name] = weights[idx]
        else:
            grid = fs.grids[idx]
            if grid is None:
                from .estimator import _prior_grid

                grid = _prior_grid(m, batch, m.latent(meta.name))
            dist, x = grid
            _route(gtheta, dist, x, weights[idx])
    gphi = _phi_gradients(q, batch, weights_by_latent)
    return gtheta, gphi, logz


def rws_update(m: ModelGraph, q: ProposalGraph, batch: SampleBatch, fs: FactorSet):
    """Ascent directions (dtheta, dphi) from a massively parallel batch.

    dtheta is the gradient of log P-hat; dphi is the posterior-weighted
    proposal score, equal to the gradient of -log P-hat in phi.
    """
    gtheta, gphi, _ = _rws_update_impl(m, q, batch, fs)
    return gtheta, gphi


def global_log_weights(m: ModelGraph, q: ProposalGraph, batch: SampleBatch, data: Dataset):
    log_r = _global_log_joint(m, batch, data) - batch.joint_logq
    mx = log_r.max()
    if not np.isfinite(mx):
        raise DegenerateEvidenceError("all global importance ratios are zero")
    w = np.exp(log_r - mx)
    return log_r, w / w.sum()


def rws_update_global(m: ModelGraph, q: ProposalGraph, batch: SampleBatch, data: Dataset):
    """Ascent directions (dtheta, dphi) from a global batch: K-term weights."""
    if batch.kind != GLOBAL:
        raise ShapeError("rws_update_global requires a batch from sample_global")
    _, w = global_log_weights(m, q, batch, data)
    K = batch.K
    gtheta = GradientStore(m.params)
    covariates = {**m.covariates, **data.covariates}
    for decl in m.latents:
        aligned = {
            j: align_to_plates(batch.values[j], m.latent(j).plates, decl.plates, lead_ndim=1)
            for j in decl.parents
        }
        dist = decl.builder(aligned, m.params)
        weight = w.reshape((K,) + (1,) * len(decl.plates))
        _route(gtheta, dist, np.asarray(batch.values[decl.name]), weight)
    for decl in m.data:
        aligned = {
            j: align_to_plates(batch.values[j], m.latent(j).plates, decl.plates, lead_ndim=1)
            for j in decl.parents
        }
        dist = decl.builder(aligned, covariates, m.params)
        weight = w.reshape((K,) + (1,) * len(decl.plates))
        _route(gtheta, dist, np.asarray(data.observed[decl.name]), weight)
    gphi = GradientStore(q.params)
    for decl in q.decls:
        mdecl = m.latent(decl.name)
        aligned = {
            j: align_to_plates(batch.values[j], m.latent(j).plates, mdecl.plates, lead_ndim=1)
            for j in decl.parents
        }
        dist = decl.builder(aligned, q.params)
        weight = w.reshape((K,) + (1,) * len(mdecl.plates))
        _route(gphi, dist, np.asarray(batch.values[decl.name]), weight)
    return gtheta, gphi


def posterior_moment(m: ModelGraph, q: ProposalGraph, batch: SampleBatch, fs: FactorSet, g):
    """Self-normalised importance estimate of a posterior moment.

    `g` may be a dict {latent: fn} (declared per-latent factorisation,
    works at any scale via single-latent marginals) or one callable over a
    full assignment, which enumerates index combinations and is only
    allowed on small plate-free models.
    """
    if isinstance(g, dict):
        _, weights = factor_weights(fs)
        out = {}
        for name, fn in g.items():
            idx = fs.index(PROPOSAL, name)
            V = weights[idx]
            arr = np.asarray(fn(batch.values[name]), dtype=np.float64)
            w = V.reshape(V.shape + (1,) * (arr.ndim - V.ndim))
            out[name] = (w * arr).sum(axis=0)
        return out
    n = len(m.latents)
    if n > 3:
        raise CapabilityError("non-factorised moments require n <= 3 latents")
    if any(l.plates for l in m.latents):
        raise CapabilityError("non-factorised moments require a plate-free model")
    K = batch.K
    if K ** n > 200000:
        raise CapabilityError(f"{K}^{n} combinations is too many to enumerate")
    names = [l.name for l in m.latents]
    log_r = np.zeros((K,) * n)
    for idx, meta in enumerate(fs.meta):
        axes_pos = [names.index(j) for j in fs.meta[idx].k_order]
        v = fs.factors[idx].values
        shape = [1] * n
        for p, j in zip(axes_pos, fs.meta[idx].k_order):
            shape[p] = K
        perm = np.argsort(axes_pos)
        log_r = log_r + v.transpose(tuple(perm)).reshape(shape)
    mx = log_r.max()
    if not np.isfinite(mx):
        raise DegenerateEvidenceError("all importance ratios are zero")
    w = np.exp(log_r - mx)
    w /= w.sum()
    first = g({name: batch.values[name][0] for name in names})
    out = np.zeros(np.shape(first))
    for combo in np.ndindex(*(K,) * n):
        out = out + w[combo] * np.asarray(
            g({name: batch.values[name][combo[t]] for t, name in enumerate(names)})
        )
    return out


@dataclass
class AdamState:
    """Adam moments plus the stepped learning-rate schedule."""

    base_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    decay_every: int = 10000
    decay_factor: float = 10.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def rate(self) -> float:
        return self.base_rate * self.decay_factor ** (-(self.step // self.decay_every))


def adam_step(state: AdamState, grads: GradientStore, params: ParamStore) -> ParamStore:
    """One bias-corrected Adam ascent step; updates `params` in place."""
    b1, b2 = state.betas
    rate = state.rate()
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        mom = state.m.get(name)
        if mom is None:
            mom = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        vel = state.v[name]
        mom = b1 * mom + (1.0 - b1) * g
        vel = b2 * vel + (1.0 - b2) * g * g
        state.m[name] = mom
        state.v[name] = vel
        params[name] = p + rate * (mom / c1) / (np.sqrt(vel / c2) + state.eps)
    state.step += 1
    return params


@dataclass
class TrainConfig:
    method: str = "mp-rws"  # or "global-rws"
    K: int = 10
    iters: int = 1000
    seed: int = 0
    eval_every: int = 100
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    # eval_fn(m, q, batch, fs_or_none) -> float, run every eval_every iterations
    eval_fn: Callable | None = None


@dataclass
class TrainTrace:
    seed: int
    records: list = field(default_factory=list)
    skipped: int = 0

    def metric(self, name: str) -> list:
        return [(r["iteration"], r[name]) for r in self.records if r.get(name) is not None]


def train(m: ModelGraph, q: ProposalGraph, data: Dataset, config: TrainConfig) -> TrainTrace:
    """sample -> factors -> update -> Adam loop; deterministic per seed."""
    if config.method not in ("mp-rws", "global-rws"):
        raise ShapeError(f"unknown training method {config.method!r}")
    rng = np.random.default_rng(config.seed)
    adam_theta = AdamState(base_rate=config.lr, betas=config.betas)
    adam_phi = AdamState(base_rate=config.lr, betas=config.betas)
    trace = TrainTrace(seed=config.seed)
    mp_mode = config.method == "mp-rws"
    sampler = q if q.kind != GLOBAL else q.with_kind("mp")
    for it in range(config.iters):
        t0 = time.perf_counter()
        record = {"iteration": it, "log_phat": None, "pred_ll": None, "seconds": None}
        try:
            if mp_mode:
                batch = sample_batch(sampler, rng, config.K)
                fs = build_factors(m, batch, data, proposal=q)
                gtheta, gphi, logz = _rws_update_impl(m, q, batch, fs)
            else:
                batch = sample_global(q, rng, config.K)
                fs = None
                logz = log_evidence_global(m, q, batch, data).log_evidence
                if not np.isfinite(logz):
                    raise DegenerateEvidenceError("global evidence estimate is zero")
                gtheta, gphi = rws_update_global(m, q, batch, data)
        except DegenerateEvidenceError:
            trace.skipped += 1
            record["log_phat"] = -np.inf
            record["seconds"] = time.perf_counter() - t0
            trace.records.append(record)
            continue
        if len(m.params):
            adam_step(adam_theta, gtheta, m.params)
        if len(q.params):
            adam_step(adam_phi, gphi, q.params)
        record["log_phat"] = float(logz)
        if config.eval_fn is not None and (it + 1) % config.eval_every == 0:
            record["pred_ll"] = float(config.eval_fn(m, q, batch, fs))
        record["seconds"] = time.perf_counter() - t0
        trace.records.append(record)
    return trace
