"""Oracle and invariant suites: unbiasedness, equivalence, gradients,
bounds, complexity.

Every suite checks production code against an independent reference:
total enumeration of proposal outcomes, explicit K^n weighted sums,
central finite differences, exact evidence oracles, or measured wall
clock. The CLI `verify` command and the acceptance tests both run these.

Replication: R independent copies of a model are the same model wrapped
in one outermost plate, so a single contraction that keeps the replica
axis produces R independent evidence draws. That turns 10^4-seed bound
checks into a few dozen vectorised passes through the ordinary sampling,
factor, and contraction code.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .distributions import Bernoulli, Categorical, NegativeBinomial, Normal
from .errors import MpinferError
from .estimator import (
    build_factors,
    log_evidence_global,
    log_evidence_mp,
    smc_log_evidence,
)
from .experiments import build_ts_single, exact_log_evidence
from .log_tensor import LogFactor, execute_keep, plan_contraction
from .model_graph import DataDecl, Dataset, LatentDecl, ModelGraph, generate_synthetic, log_joint
from .params import ParamStore, unbroadcast
from .proposals import (
    GLOBAL,
    MP,
    TMC,
    ProposalDecl,
    ProposalGraph,
    SampleBatch,
    mixture_log_density,
    sample_batch,
    sample_global,
)
from .training import rws_update, rws_update_global


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    measured: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.suite}/{self.name}: {self.measured}"


# ---------------------------------------------------------------------------
# replication: many independent evidence draws in one contraction


def replicate(m: ModelGraph, q: ProposalGraph, data: Dataset, R: int, plate: str = "replica"):
    """Wrap model, proposal, and data in an outermost replica plate."""
    if plate in m.plates:
        raise MpinferError(f"plate {plate!r} already exists")
    latents = [
        LatentDecl(l.name, l.builder, l.parents, (plate,) + l.plates, l.event_shape, l.support)
        for l in m.latents
    ]
    datad = [
        DataDecl(d.name, d.builder, d.parents, (plate,) + d.plates, d.event_shape)
        for d in m.data
    ]
    m_rep = ModelGraph(
        {plate: R, **m.plates}, latents, datad, params=m.params, covariates=m.covariates
    )
    observed = {
        k: np.broadcast_to(np.asarray(v), (R,) + np.asarray(v).shape)
        for k, v in data.observed.items()
    }
    data_rep = Dataset(observed=observed, covariates=dict(data.covariates))
    if q.borrows_prior:
        q_rep = ProposalGraph.from_prior(m_rep, q.kind)
    else:
        q_rep = ProposalGraph(
            m_rep, [ProposalDecl(d.name, d.builder, d.parents) for d in q.decls],
            q.params, q.kind,
        )
    return m_rep, q_rep, data_rep


def evidence_draws(
    m: ModelGraph,
    q: ProposalGraph,
    data: Dataset,
    K: int,
    n: int,
    rng: np.random.Generator,
    kind: str = MP,
    chunk: int = 250,
) -> np.ndarray:
    """n independent massively parallel (or TMC) evidence draws at size K."""
    out = np.empty(n)
    done = 0
    plan = None
    while done < n:
        R = min(chunk, n - done)
        m_rep, q_rep, data_rep = replicate(m, q, data, R)
        q_rep = q_rep.with_kind(kind)
        batch = sample_batch(q_rep, rng, K)
        fs = build_factors(m_rep, batch, data_rep, proposal=q_rep)
        if plan is None or R != chunk or plan.signatures != tuple(tuple(f.axes) for f in fs.factors):
            plan = plan_contraction(fs.signatures, keep=("replica",))
        axes, vals = execute_keep(plan, fs.factors)
        out[done:done + R] = vals
        done += R
    return out


def global_draws(m, q, data, K, n, rng) -> np.ndarray:
    qg = q.with_kind(GLOBAL)
    out = np.empty(n)
    for i in range(n):
        out[i] = log_evidence_global(m, q, sample_global(qg, rng, K), data).log_evidence
    return out


def smc_draws(m, data, K, n, rng) -> np.ndarray:
    out = np.empty(n)
    for i in range(n):
        out[i] = smc_log_evidence(m, K, rng, data)
    return out


def draws_for_method(m, q, data, method: str, K: int, n: int, rng) -> np.ndarray:
    """Dispatch: 'mp', 'tmc', 'global', or 'smc' evidence draws."""
    if method == "mp":
        return evidence_draws(m, q, data, K, n, rng, kind=MP)
    if method == "tmc":
        return evidence_draws(m, q, data, K, n, rng, kind=TMC)
    if method == "global":
        return global_draws(m, q, data, K, n, rng)
    if method == "smc":
        return smc_draws(m, data, K, n, rng)
    raise MpinferError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# unbiasedness by total enumeration of proposal outcomes


_Z2_ROWS = np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]])
_X_ROWS = np.array([[0.6, 0.3, 0.1], [0.1, 0.2, 0.7]])
_Q2_ROWS = np.array([[0.4, 0.6], [0.75, 0.25], [0.5, 0.5]])
_Q1_W = np.array([0.25, 0.45, 0.3])


def _discrete_pair():
    m = ModelGraph(
        plates={},
        latents=[
            LatentDecl("z1", lambda par, th: Categorical(weights=[0.5, 0.3, 0.2]), support=3),
            LatentDecl("z2", lambda par, th: Categorical(
                weights=np.take(_Z2_ROWS, np.asarray(par["z1"], dtype=np.int64), axis=0)),
                parents=("z1",), support=2),
        ],
        data=[DataDecl("x", lambda par, cov, th: Categorical(
            weights=np.take(_X_ROWS, np.asarray(par["z2"], dtype=np.int64), axis=0)),
            parents=("z2",))],
    )
    q = ProposalGraph(m, [
        ProposalDecl("z1", lambda par, ph: Categorical(weights=_Q1_W)),
        ProposalDecl("z2", lambda par, ph: Categorical(
            weights=np.take(_Q2_ROWS, np.asarray(par["z1"], dtype=np.int64), axis=0)),
            parents=("z1",)),
    ], ParamStore(), MP)
    return m, q


def _batch_from_values(q, kind, z1_pair, z2_pair, joint_logq=None):
    values = {"z1": np.asarray(z1_pair), "z2": np.asarray(z2_pair)}
    marg1, _, _ = mixture_log_density(q, "z1", values["z1"], {})
    marg2, _, _ = mixture_log_density(q, "z2", values["z2"], {"z1": values["z1"]})
    return SampleBatch(kind, 2, values, {"z1": marg1, "z2": marg2}, joint_logq=joint_logq)


def expected_mp_evidence(kind: str = MP) -> tuple[float, float]:
    """(E[P-hat], exact P(x)) by enumerating every batch the proposal can
    produce, weighted by its sampling probability. K=2.
    """
    m, q = _discrete_pair()
    data = Dataset(observed={"x": np.asarray(1)})
    exact = float(np.exp(exact_log_evidence(m, data)))
    total = 0.0
    K = 2
    perms = [(0, 1), (1, 0)]
    for z1 in itertools.product(range(3), repeat=K):
        p_z1 = _Q1_W[list(z1)].prod()
        if kind == MP:
            outer = [(np.asarray(pi), 0.5) for pi in perms]
        elif kind == TMC:
            outer = [(np.asarray(c), 0.25) for c in itertools.product(range(K), repeat=K)]
        else:  # global: particle k of z2 conditions on particle k of z1
            outer = [(np.arange(K), 1.0)]
        for assign, p_assign in outer:
            for z2 in itertools.product(range(2), repeat=K):
                p_z2 = np.prod([_Q2_ROWS[z1[assign[k]], z2[k]] for k in range(K)])
                prob = p_z1 * p_assign * p_z2
                if kind == GLOBAL:
                    joint = np.log(_Q1_W[list(z1)]) + np.log(
                        [_Q2_ROWS[z1[k], z2[k]] for k in range(K)]
                    )
                    batch = _batch_from_values(q, GLOBAL, z1, z2, joint_logq=joint)
                    est = log_evidence_global(m, q, batch, data).log_evidence
                else:
                    batch = _batch_from_values(q, kind, z1, z2)
                    est = log_evidence_mp(build_factors(m, batch, data)).log_evidence
                total += prob * np.exp(est)
    return float(total), exact


def verify_unbiasedness() -> list[CheckResult]:
    out = []
    t0 = time.perf_counter()
    for kind in (MP, TMC, GLOBAL):
        got, exact = expected_mp_evidence(kind)
        err = abs(got - exact)
        out.append(CheckResult(
            "unbiasedness", f"enumerated-expectation-{kind}", err <= 1e-10,
            f"E[P-hat]={got:.12f} exact={exact:.12f} |diff|={err:.2e} (tol 1e-10)",
        ))
    out.append(CheckResult(
        "unbiasedness", "runtime", time.perf_counter() - t0 < 10.0,
        f"{time.perf_counter() - t0:.2f}s (budget 10s)",
    ))
    return out


# ---------------------------------------------------------------------------
# random small instances and explicit-sum oracles


def random_instance(rng: np.random.Generator, allow_plate: bool = False):
    """A small random model/proposal pair with trainable theta and phi."""
    n = int(rng.integers(1, 4))
    theta = ParamStore()
    phi = ParamStore()
    latents = []
    is_discrete = []
    for i in range(n):
        name = f"z{i}"
        parents = tuple(f"z{j}" for j in range(i) if rng.random() < 0.5)
        discrete = rng.random() < 0.35
        is_discrete.append(discrete)
        if discrete:
            w = rng.uniform(0.2, 1.0, size=3)
            w /= w.sum()
            latents.append(LatentDecl(
                name,
                lambda par, th, _w=w: Categorical(weights=_w),
                parents=(), support=3,
            ))
        elif parents:
            # trainable knob must be a direct parameter: the store entry is
            # the log-variance, the mean is derived from the parents
            theta[f"prior_logvar_{i}"] = rng.normal() * 0.3
            coef = rng.uniform(-0.8, 0.8, size=len(parents))

            def builder(par, th, _ps=parents, _c=coef, _k=f"prior_logvar_{i}"):
                mean = 0.0
                for c, p in zip(_c, _ps):
                    mean = mean + c * np.asarray(par[p], dtype=np.float64)
                return Normal(mean, log_var=th.ref(_k))

            latents.append(LatentDecl(name, builder, parents=parents))
        else:
            theta[f"prior_loc_{i}"] = rng.normal()
            latents.append(LatentDecl(
                name,
                lambda par, th, _k=f"prior_loc_{i}": Normal(th.ref(_k), 1.0),
            ))
    dparents = tuple(f"z{j}" for j in range(n) if rng.random() < 0.7) or (f"z{n-1}",)
    theta["lik_logvar"] = rng.normal() * 0.3
    dcoef = rng.uniform(-1.0, 1.0, size=len(dparents))

    def dbuilder(par, cov, th, _ps=dparents, _c=dcoef):
        mean = 0.0
        for c, p in zip(_c, _ps):
            mean = mean + c * np.asarray(par[p], dtype=np.float64)
        return Normal(mean, log_var=th.ref("lik_logvar"))

    m = ModelGraph({}, latents, [DataDecl("x", dbuilder, parents=dparents)], params=theta)

    qdecls = []
    for i in range(n):
        name = f"z{i}"
        if is_discrete[i]:
            phi[f"q_logits_{i}"] = rng.normal(size=3) * 0.5
            qdecls.append(ProposalDecl(
                name, lambda par, ph, _k=f"q_logits_{i}": Categorical(logits=ph.ref(_k))
            ))
        else:
            phi[f"q_logvar_{i}"] = rng.normal() * 0.3
            qa = tuple(
                f"z{j}" for j in range(i) if (not is_discrete[j]) and rng.random() < 0.4
            )
            if qa:
                # the mean is parent-derived, so the trainable knob is the
                # log-variance (ParamRefs must be direct parameters)
                qc = rng.uniform(-0.6, 0.6, size=len(qa))
                intercept = rng.normal() * 0.5

                def qbuilder(par, ph, _qa=qa, _qc=qc, _b=intercept, _vk=f"q_logvar_{i}"):
                    mean = _b
                    for c, p in zip(_qc, _qa):
                        mean = mean + c * np.asarray(par[p], dtype=np.float64)
                    return Normal(mean, log_var=ph.ref(_vk))

                qdecls.append(ProposalDecl(name, qbuilder, parents=qa))
            else:
                phi[f"q_loc_{i}"] = rng.normal() * 0.5
                qdecls.append(ProposalDecl(
                    name,
                    lambda par, ph, _lk=f"q_loc_{i}", _vk=f"q_logvar_{i}": Normal(
                        ph.ref(_lk), log_var=ph.ref(_vk)),
                ))
    q = ProposalGraph(m, qdecls, phi, MP)
    truth, data = generate_synthetic(m, rng)
    return m, q, data


def _accumulate_scalar_grads(store_shapes, acc, dist, x, weight):
    partials = dist.grad_log_prob(np.asarray(x))
    for pname, _val, key in dist.param_entries():
        if key is None:
            continue
        acc[key] = acc[key] + weight * unbroadcast(
            np.broadcast_to(partials[pname], store_shapes[key]), store_shapes[key]
        )


def explicit_mp_updates(m, q, batch, data):
    """Importance-weighted update oracle: enumerate all K^n combinations.

    Per-combination gradients are evaluated at scalar assignments through
    the builders; weights are the self-normalised ratios r/sum(r).
    """
    names = [l.name for l in m.latents]
    K = batch.K
    log_r = {}
    for combo in itertools.product(range(K), repeat=len(names)):
        assign = {nm: np.asarray(batch.values[nm][k]) for nm, k in zip(names, combo)}
        lq = sum(
            float(batch.marginal_logq[nm].values[k]) for nm, k in zip(names, combo)
        )
        log_r[combo] = log_joint(m, assign, data) - lq
    vals = np.array(list(log_r.values()))
    w_all = np.exp(vals - vals.max())
    w_all /= w_all.sum()
    weights = dict(zip(log_r.keys(), w_all))

    tshapes = {k: v.shape for k, v in m.params.items()}
    pshapes = {k: v.shape for k, v in q.params.items()}
    gtheta = {k: np.zeros(s) for k, s in tshapes.items()}
    gphi = {k: np.zeros(s) for k, s in pshapes.items()}
    for combo, w in weights.items():
        assign = {nm: np.asarray(batch.values[nm][k]) for nm, k in zip(names, combo)}
        for decl in m.latents:
            dist = decl.builder({p: assign[p] for p in decl.parents}, m.params)
            _accumulate_scalar_grads(tshapes, gtheta, dist, assign[decl.name], w)
        for decl in m.data:
            dist = decl.builder(
                {p: assign[p] for p in decl.parents}, {**m.covariates, **data.covariates},
                m.params,
            )
            _accumulate_scalar_grads(tshapes, gtheta, dist, data.observed[decl.name], w)
        for decl in q.decls:
            k_i = combo[names.index(decl.name)]
            x_i = assign[decl.name]
            if decl.parents:
                comp_lp = []
                comp_dist = []
                for ptuple in itertools.product(range(K), repeat=len(decl.parents)):
                    pv = {
                        p: np.asarray(batch.values[p][kk])
                        for p, kk in zip(decl.parents, ptuple)
                    }
                    dist = decl.builder(pv, q.params)
                    comp_lp.append(float(dist.log_prob(x_i)))
                    comp_dist.append(dist)
                comp_lp = np.asarray(comp_lp)
                resp = np.exp(comp_lp - comp_lp.max())
                resp /= resp.sum()
                for r_c, dist in zip(resp, comp_dist):
                    _accumulate_scalar_grads(pshapes, gphi, dist, x_i, w * r_c)
            else:
                dist = decl.builder({}, q.params)
                _accumulate_scalar_grads(pshapes, gphi, dist, x_i, w)
    return gtheta, gphi


def explicit_global_updates(m, q, batch, data):
    """K-term importance-weighted update oracle for global batches."""
    names = [l.name for l in m.latents]
    K = batch.K
    log_r = np.array([
        log_joint(m, {nm: np.asarray(batch.values[nm][k]) for nm in names}, data)
        - float(batch.joint_logq[k])
        for k in range(K)
    ])
    w = np.exp(log_r - log_r.max())
    w /= w.sum()
    tshapes = {k: v.shape for k, v in m.params.items()}
    pshapes = {k: v.shape for k, v in q.params.items()}
    gtheta = {k: np.zeros(s) for k, s in tshapes.items()}
    gphi = {k: np.zeros(s) for k, s in pshapes.items()}
    for k in range(K):
        assign = {nm: np.asarray(batch.values[nm][k]) for nm in names}
        for decl in m.latents:
            dist = decl.builder({p: assign[p] for p in decl.parents}, m.params)
            _accumulate_scalar_grads(tshapes, gtheta, dist, assign[decl.name], w[k])
        for decl in m.data:
            dist = decl.builder(
                {p: assign[p] for p in decl.parents}, {**m.covariates, **data.covariates},
                m.params,
            )
            _accumulate_scalar_grads(tshapes, gtheta, dist, data.observed[decl.name], w[k])
        for decl in q.decls:
            dist = decl.builder({p: assign[p] for p in decl.parents}, q.params)
            _accumulate_scalar_grads(pshapes, gphi, dist, assign[decl.name], w[k])
    return gtheta, gphi


def verify_equivalence(instances: int = 50, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_mp = 0.0
    worst_gl = 0.0
    for _ in range(instances):
        m, q, data = random_instance(rng)
        K = int(rng.integers(2, 4))
        batch = sample_batch(q, rng, K)
        fs = build_factors(m, batch, data)
        gt, gp = rws_update(m, q, batch, fs)
        et, ep = explicit_mp_updates(m, q, batch, data)
        for k in et:
            worst_mp = max(worst_mp, float(np.max(np.abs(gt[k] - et[k]), initial=0.0)))
        for k in ep:
            worst_mp = max(worst_mp, float(np.max(np.abs(gp[k] - ep[k]), initial=0.0)))

        gbatch = sample_global(q.with_kind(GLOBAL), rng, K)
        gt2, gp2 = rws_update_global(m, q, gbatch, data)
        et2, ep2 = explicit_global_updates(m, q, gbatch, data)
        for k in et2:
            worst_gl = max(worst_gl, float(np.max(np.abs(gt2[k] - et2[k]), initial=0.0)))
        for k in ep2:
            worst_gl = max(worst_gl, float(np.max(np.abs(gp2[k] - ep2[k]), initial=0.0)))
    dt = time.perf_counter() - t0
    return [
        CheckResult("equivalence", "mp-weighted-sum-vs-gradient-form", worst_mp <= 1e-8,
                    f"max |diff| = {worst_mp:.2e} over {instances} instances (tol 1e-8)"),
        CheckResult("equivalence", "global-weighted-sum-vs-gradient-form", worst_gl <= 1e-8,
                    f"max |diff| = {worst_gl:.2e} over {instances} instances (tol 1e-8)"),
        CheckResult("equivalence", "runtime", dt < 60.0, f"{dt:.1f}s (budget 60s)"),
    ]


# ---------------------------------------------------------------------------
# gradient correctness against central finite differences


def _fd_check_distribution(make, params: dict, x, h: float = 1e-5) -> float:
    """Worst mixed abs/rel error between grad_log_prob and central FD."""
    dist = make(**params)
    grads = dist.grad_log_prob(x)
    worst = 0.0
    for pname in grads:
        base = np.asarray(params[pname], dtype=np.float64)
        g = np.broadcast_to(np.asarray(grads[pname], dtype=np.float64), base.shape)
        fd = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            e = np.zeros_like(flat)
            e[i] = h
            up = make(**{**params, pname: (flat + e).reshape(base.shape)}).log_prob(x)
            dn = make(**{**params, pname: (flat - e).reshape(base.shape)}).log_prob(x)
            fd.reshape(-1)[i] = (float(up) - float(dn)) / (2 * h)
        err = np.abs(g - fd) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
        worst = max(worst, float(err.max()))
    return worst


def distribution_gradient_errors(seed: int = 0, trials: int = 100) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    worst = {"normal": 0.0, "categorical": 0.0, "bernoulli": 0.0, "negative_binomial": 0.0}
    for _ in range(trials):
        mean = rng.normal() * 2
        log_var = rng.normal() * 0.7
        x = rng.normal() * 3
        worst["normal"] = max(worst["normal"], _fd_check_distribution(
            lambda mean, log_var: Normal(mean, log_var=log_var),
            {"mean": mean, "log_var": log_var}, x))
        logits = rng.normal(size=int(rng.integers(2, 6)))
        xc = int(rng.integers(0, logits.size))
        worst["categorical"] = max(worst["categorical"], _fd_check_distribution(
            lambda logits: Categorical(logits=logits), {"logits": logits}, xc))
        logit = rng.normal() * 2
        xb = int(rng.integers(0, 2))
        worst["bernoulli"] = max(worst["bernoulli"], _fd_check_distribution(
            lambda logit: Bernoulli(logit=logit), {"logit": logit}, xb))
        log_tc = np.log(rng.uniform(0.5, 200.0))
        nb_logit = rng.normal()
        xn = int(rng.integers(0, 40))
        worst["negative_binomial"] = max(worst["negative_binomial"], _fd_check_distribution(
            lambda log_total_count, logit: NegativeBinomial(
                np.exp(log_total_count), logit),
            {"log_total_count": log_tc, "logit": nb_logit}, xn))
    return worst


def rws_gradient_fd_error(seed: int = 0, instances: int = 10) -> float:
    """Worst mixed error of rws_update vs finite differences of the
    evidence under fixed particle values.
    """
    from .proposals import refresh_marginals

    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0
    for _ in range(instances):
        m, q, data = random_instance(rng)
        batch = sample_batch(q, rng, int(rng.integers(2, 4)))
        fs = build_factors(m, batch, data)
        gt, gp = rws_update(m, q, batch, fs)

        def logz_now():
            fs2 = build_factors(m, refresh_marginals(q, batch), data)
            return log_evidence_mp(fs2).log_evidence

        for store, grads, sign in ((m.params, gt, 1.0), (q.params, gp, -1.0)):
            for name in store.names():
                base = store[name].copy()
                g = grads[name]
                flat = base.reshape(-1)
                for i in range(flat.size):
                    e = np.zeros_like(flat)
                    e[i] = h
                    store[name] = (flat + e).reshape(base.shape)
                    up = logz_now()
                    store[name] = (flat - e).reshape(base.shape)
                    dn = logz_now()
                    store[name] = base
                    fd = sign * (up - dn) / (2 * h)
                    gv = float(np.asarray(g).reshape(-1)[i])
                    err = abs(gv - fd) / max(1.0, abs(gv), abs(fd))
                    worst = max(worst, err)
    return worst


def verify_gradients(seed: int = 0) -> list[CheckResult]:
    out = []
    worst = distribution_gradient_errors(seed)
    for kind, err in worst.items():
        out.append(CheckResult(
            "gradients", f"distribution-{kind}", err <= 1e-5,
            f"max rel err = {err:.2e} over 100 draws (tol 1e-5)",
        ))
    err = rws_gradient_fd_error(seed)
    out.append(CheckResult(
        "gradients", "rws-update-vs-finite-differences", err <= 1e-4,
        f"max rel err = {err:.2e} (tol 1e-4)",
    ))
    return out


# ---------------------------------------------------------------------------
# bounds and large-K convergence


def _conjugate_model():
    m = ModelGraph(
        {},
        [LatentDecl("z", lambda par, th: Normal(0.0, 1.0))],
        [DataDecl("x", lambda par, cov, th: Normal(par["z"], 1.0), parents=("z",))],
    )
    phi = ParamStore({"loc": np.asarray(0.3), "logvar": np.asarray(-0.2)})
    q = ProposalGraph(m, [
        ProposalDecl("z", lambda par, ph: Normal(ph.ref("loc"), log_var=ph.ref("logvar"))),
    ], phi, MP)
    return m, q, Dataset(observed={"x": np.asarray(0.7)})


def verify_bounds(n_seeds: int = 10000, Ks=(3, 10, 30), seed: int = 0) -> list[CheckResult]:
    out = []
    t0 = time.perf_counter()
    m, q, data = None, None, None
    m, q = build_ts_single(30)
    _, data = generate_synthetic(m, np.random.default_rng(42))
    exact = exact_log_evidence(m, data)
    for method in ("mp", "tmc", "global", "smc"):
        for K in Ks:
            rng = np.random.default_rng([seed, hash(method) % (2**31), K])
            draws = draws_for_method(m, q, data, method, K, n_seeds, rng)
            mean = float(draws.mean())
            se = float(draws.std(ddof=1) / np.sqrt(n_seeds))
            ok = mean <= exact + 3 * se
            out.append(CheckResult(
                "bounds", f"jensen-{method}-K{K}", ok,
                f"mean log P-hat = {mean:.4f} <= exact {exact:.4f} + 3*SE ({3 * se:.4f})",
            ))

    mc, qc, dc = _conjugate_model()
    exact_c = exact_log_evidence(mc, dc)
    rng = np.random.default_rng(seed + 1)
    for label, val in (
        ("global", global_draws(mc, qc, dc, 10000, 1, rng)[0]),
        ("mp", evidence_draws(mc, qc, dc, 10000, 1, rng)[0]),
    ):
        err = abs(val - exact_c)
        out.append(CheckResult(
            "bounds", f"converge-K10000-{label}", err <= 0.05,
            f"|{val:.5f} - exact {exact_c:.5f}| = {err:.4f} nats (tol 0.05)",
        ))
    val = global_draws(m, q, data, 10000, 1, np.random.default_rng(seed + 2))[0]
    err = abs(val - exact)
    out.append(CheckResult(
        "bounds", "converge-K10000-global-chain", err <= 0.05,
        f"|{val:.5f} - exact {exact:.5f}| = {err:.4f} nats (tol 0.05)",
    ))
    dt = time.perf_counter() - t0
    out.append(CheckResult("bounds", "runtime", dt < 120.0, f"{dt:.1f}s (budget 120s)"))
    return out


# ---------------------------------------------------------------------------
# complexity: polynomial time and memory in K


def _mp_pass_seconds(m, q, data, K, rng) -> tuple[float, int]:
    t0 = time.perf_counter()
    batch = sample_batch(q, rng, K)
    fs = build_factors(m, batch, data, proposal=q)
    est = log_evidence_mp(fs)
    dt = time.perf_counter() - t0
    assert np.isfinite(est.log_evidence)
    return dt, fs.plan().peak_size


def verify_complexity(seed: int = 0) -> list[CheckResult]:
    out = []
    N = 30
    m, q = build_ts_single(N)
    _, data = generate_synthetic(m, np.random.default_rng(7))
    rng = np.random.default_rng(seed)
    _mp_pass_seconds(m, q, data, 16, rng)  # warm caches
    dt, peak = _mp_pass_seconds(m, q, data, 128, rng)
    out.append(CheckResult(
        "complexity", "K128-wall-clock", dt < 1.0, f"{dt * 1e3:.1f} ms (budget 1s)"
    ))
    out.append(CheckResult(
        "complexity", "K128-peak-entries", peak <= 4 * 128 * 128,
        f"largest intermediate = {peak} entries (budget 4*K^2 = {4 * 128 * 128})",
    ))
    total = sum(int(np.prod([a.size for a in sig])) for sig in (
        build_factors(m, sample_batch(q, np.random.default_rng(1), 128), data).signatures
    ))
    out.append(CheckResult(
        "complexity", "K128-total-factor-entries", total <= 4 * N * 128 * 128,
        f"sum of factor sizes = {total} (budget 4*N*K^2 = {4 * N * 128 * 128})",
    ))
    times = {}
    for K in (362, 512, 724, 1024):
        best = np.inf
        for _ in range(5):
            dt, _ = _mp_pass_seconds(m, q, data, K, rng)
            best = min(best, dt)
        times[K] = best
    ks = np.log(np.array(list(times), dtype=np.float64))
    ts = np.log(np.array([times[k] for k in times]))
    slope = float(np.polyfit(ks, ts, 1)[0])
    out.append(CheckResult(
        "complexity", "K-scaling-exponent", 1.7 <= slope <= 2.3,
        f"fit t ~ K^{slope:.2f} over K in {list(times)} (target [1.7, 2.3]); "
        + " ".join(f"K={k}:{v * 1e3:.0f}ms" for k, v in times.items()),
    ))
    return out


SUITES = {
    "unbiasedness": verify_unbiasedness,
    "equivalence": verify_equivalence,
    "gradients": verify_gradients,
    "bounds": verify_bounds,
    "complexity": verify_complexity,
}


def run_suite(name: str) -> tuple[list[CheckResult], bool]:
    if name not in SUITES:
        raise KeyError(name)
    results = SUITES[name]()
    return results, all(r.passed for r in results)
