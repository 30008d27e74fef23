"""Evidence estimator tests: factor construction, MP and global estimates,
the particle-filter baseline.

Oracles: per-entry recomputation of factor tensors through the raw
distributions, dense enumeration of index combinations through the joint
density, and closed-form conjugate/linear-Gaussian evidence.
"""

import itertools

import numpy as np
import pytest

from mpinfer.distributions import Categorical, Normal
from mpinfer.errors import ShapeError, StructureError
from mpinfer.estimator import (
    build_factors,
    log_evidence_global,
    log_evidence_mp,
    posterior_marginal,
    smc_log_evidence,
)
from mpinfer.experiments import build_ts_multi, build_ts_single, exact_log_evidence
from mpinfer.model_graph import DataDecl, Dataset, LatentDecl, ModelGraph, generate_synthetic, log_joint
from mpinfer.params import ParamStore
from mpinfer.proposals import ProposalDecl, ProposalGraph, sample_global, sample_mp
from mpinfer.verify import random_instance


def mp_brute_force(m, batch, data):
    names = [l.name for l in m.latents]
    K = batch.K
    terms = []
    for combo in itertools.product(range(K), repeat=len(names)):
        assign = {nm: np.asarray(batch.values[nm][k]) for nm, k in zip(names, combo)}
        lq = sum(float(batch.marginal_logq[nm].values[k]) for nm, k in zip(names, combo))
        terms.append(log_joint(m, assign, data) - lq)
    terms = np.asarray(terms)
    mx = terms.max()
    if not np.isfinite(mx):
        return -np.inf
    return float(np.log(np.exp(terms - mx).mean()) + mx)


class TestBuildFactors:
    def test_chain_factor_shapes(self):
        m, q = build_ts_single(30)
        _, data = generate_synthetic(m, np.random.default_rng(0))
        batch = sample_mp(q, np.random.default_rng(1), 3)
        fs = build_factors(m, batch, data)
        assert fs.latent_factor("z5").values.shape == (3, 3)
        assert fs.latent_factor("z2").values.shape == (3,)
        assert fs.data_factor("x").values.shape == (3,)

    def test_parent_free_prior_proposal_factor_is_zero(self):
        # single latent, proposal identical to the prior: P/Q = 1 cellwise
        m = ModelGraph({}, [LatentDecl("z", lambda par, th: Normal(0.3, 1.7))], [
            DataDecl("x", lambda par, cov, th: Normal(par["z"], 1.0), parents=("z",)),
        ])
        q = ProposalGraph(m, [ProposalDecl("z", lambda par, ph: Normal(0.3, 1.7))],
                          ParamStore(), "mp")
        batch = sample_mp(q, np.random.default_rng(2), 4)
        fs = build_factors(m, batch, Dataset(observed={"x": np.asarray(0.0)}))
        np.testing.assert_allclose(fs.latent_factor("z").values, 0.0, atol=1e-12)

    def test_prior_proposal_chain_entries_not_zero_off_couple(self):
        # with parents, the denominator is the mixture, not the conditional,
        # so even matched indices need not cancel; verify every entry
        # against a per-entry recomputation
        m, q = build_ts_single(5)
        data = Dataset(observed={"x": np.asarray(0.2)})
        batch = sample_mp(q, np.random.default_rng(3), 3)
        fs = build_factors(m, batch, data)
        f = fs.latent_factor("z3")
        z3, z2 = batch.values["z3"], batch.values["z2"]
        for ki in range(3):
            comps = [float(Normal(z2[j], 1 / 5).log_prob(z3[ki])) for j in range(3)]
            mix = np.log(np.mean(np.exp(comps)))
            for kp in range(3):
                want = float(Normal(z2[kp], 1 / 5).log_prob(z3[ki])) - mix
                assert f.values[ki, kp] == pytest.approx(want, abs=1e-12)
        assert np.abs(np.diag(f.values)).max() > 1e-6

    def test_batch_model_mismatch_rejected(self):
        m, q = build_ts_single(5)
        m2, _ = build_ts_single(6)
        batch = sample_mp(q, np.random.default_rng(4), 2)
        with pytest.raises(ShapeError):
            build_factors(m2, batch, Dataset(observed={"x": np.asarray(0.0)}))


class TestLogEvidenceMp:
    def test_k1_is_single_sample_ratio(self):
        rng = np.random.default_rng(5)
        m, q, data = random_instance(rng)
        batch = sample_mp(q, rng, 1)
        fs = build_factors(m, batch, data)
        est = log_evidence_mp(fs)
        names = [l.name for l in m.latents]
        assign = {nm: np.asarray(batch.values[nm][0]) for nm in names}
        lq = sum(float(batch.marginal_logq[nm].values[0]) for nm in names)
        assert est.log_evidence == pytest.approx(log_joint(m, assign, data) - lq, abs=1e-10)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        m, q, data = random_instance(rng)
        K = int(rng.integers(2, 4))
        batch = sample_mp(q, rng, K)
        est = log_evidence_mp(build_factors(m, batch, data))
        assert est.log_evidence == pytest.approx(mp_brute_force(m, batch, data), abs=1e-12)

    def test_degenerate_evidence_returned_not_raised(self):
        m = ModelGraph({}, [
            LatentDecl("z", lambda par, th: Categorical(weights=[0.5, 0.5]), support=2),
        ], [
            DataDecl("x", lambda par, cov, th: Categorical(
                weights=np.take(np.array([[0.0, 1.0], [0.0, 1.0]]),
                                np.asarray(par["z"], dtype=np.int64), axis=0)),
                parents=("z",)),
        ])
        q = ProposalGraph(m, [
            ProposalDecl("z", lambda par, ph: Categorical(weights=[0.5, 0.5])),
        ], ParamStore(), "mp")
        batch = sample_mp(q, np.random.default_rng(6), 2)
        data = Dataset(observed={"x": np.asarray(0)})  # impossible observation
        est = log_evidence_mp(build_factors(m, batch, data))
        assert est.log_evidence == -np.inf


class TestLogEvidenceGlobal:
    def test_k1_equals_mp_on_same_values(self):
        rng = np.random.default_rng(7)
        m, q, data = random_instance(rng)
        gb = sample_global(q.with_kind("global"), rng, 1)
        eg = log_evidence_global(m, q, gb, data)
        names = [l.name for l in m.latents]
        assign = {nm: np.asarray(gb.values[nm][0]) for nm in names}
        want = log_joint(m, assign, data) - float(gb.joint_logq[0])
        assert eg.log_evidence == pytest.approx(want, abs=1e-10)

    def test_posterior_proposal_zero_variance(self):
        # conjugate pair: z ~ N(0,1), x ~ N(z,1) at x; the posterior is
        # N(x/2, 1/2) and proposing from it makes every draw exact
        x = 0.8
        m = ModelGraph({}, [LatentDecl("z", lambda par, th: Normal(0.0, 1.0))], [
            DataDecl("x", lambda par, cov, th: Normal(par["z"], 1.0), parents=("z",)),
        ])
        q = ProposalGraph(m, [
            ProposalDecl("z", lambda par, ph: Normal(x / 2, 0.5)),
        ], ParamStore(), "global")
        data = Dataset(observed={"x": np.asarray(x)})
        exact = float(Normal(0.0, 2.0).log_prob(x))
        vals = [
            log_evidence_global(m, q, sample_global(q, np.random.default_rng(s), 4), data
                                ).log_evidence
            for s in range(20)
        ]
        np.testing.assert_allclose(vals, exact, atol=1e-10)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(8)
        m, q, data = random_instance(rng)
        gb = sample_global(q.with_kind("global"), rng, 5)
        eg = log_evidence_global(m, q, gb, data)
        names = [l.name for l in m.latents]
        rs = [
            log_joint(m, {nm: np.asarray(gb.values[nm][k]) for nm in names}, data)
            - float(gb.joint_logq[k])
            for k in range(5)
        ]
        assert eg.log_evidence == pytest.approx(
            np.log(np.mean(np.exp(rs))), abs=1e-10)

    def test_requires_global_batch(self):
        rng = np.random.default_rng(9)
        m, q, data = random_instance(rng)
        batch = sample_mp(q, rng, 2)
        with pytest.raises(ShapeError):
            log_evidence_global(m, q, batch, data)


class TestPosteriorMarginalAccess:
    def test_full_k_marginal_sums_to_one_per_factor(self):
        rng = np.random.default_rng(10)
        m, q, data = random_instance(rng)
        batch = sample_mp(q, rng, 3)
        fs = build_factors(m, batch, data)
        w = posterior_marginal(fs, "proposal", m.latents[0].name)
        assert w.values.sum() == pytest.approx(1.0, abs=1e-10)
        assert (w.values >= 0).all()


class TestSmc:
    def test_no_observations_gives_zero(self):
        m = ModelGraph({}, [
            LatentDecl("z1", lambda par, th: Normal(0.0, 1.0)),
            LatentDecl("z2", lambda par, th: Normal(par["z1"], 1.0), parents=("z1",)),
        ], [])
        v = smc_log_evidence(m, 64, np.random.default_rng(0), Dataset(observed={}))
        assert v == 0.0

    def test_non_chain_rejected(self):
        m = ModelGraph({}, [
            LatentDecl("a", lambda par, th: Normal(0.0, 1.0)),
            LatentDecl("b", lambda par, th: Normal(0.0, 1.0)),
            LatentDecl("c", lambda par, th: Normal(
                np.asarray(par["a"]) + np.asarray(par["b"]), 1.0), parents=("a", "b")),
        ], [])
        with pytest.raises(StructureError):
            smc_log_evidence(m, 8, np.random.default_rng(0), Dataset(observed={}))

    def test_single_terminal_observation_matches_global_in_law(self):
        # with one observation at the last step and the prior as proposal,
        # both estimators average the same likelihood-of-prior-draw ratios
        m, q = build_ts_single(8)
        data = Dataset(observed={"x": np.asarray(0.5)})
        n, K = 4000, 8
        smc_vals = np.array([
            smc_log_evidence(m, K, np.random.default_rng([1, s]), data) for s in range(n)
        ])
        glob_vals = np.array([
            log_evidence_global(
                m, q, sample_global(q.with_kind("global"), np.random.default_rng([2, s]), K),
                data).log_evidence
            for s in range(n)
        ])
        se = np.sqrt(smc_vals.var() / n + glob_vals.var() / n)
        assert abs(smc_vals.mean() - glob_vals.mean()) < 4 * se

    def test_large_k_near_exact_on_multi_obs_chain(self):
        m, q = build_ts_multi(30)
        _, data = generate_synthetic(m, np.random.default_rng(11))
        exact = exact_log_evidence(m, data)
        v = smc_log_evidence(m, 10_000, np.random.default_rng(12), data)
        assert abs(v - exact) < 0.05


class TestMonotonicityInK:
    def test_mean_log_evidence_nondecreasing(self):
        m, q = build_ts_single(10)
        _, data = generate_synthetic(m, np.random.default_rng(13))
        from mpinfer.verify import evidence_draws

        stats = {}
        for K in (1, 3, 10, 30):
            d = evidence_draws(m, q, data, K, 3000, np.random.default_rng([3, K]))
            stats[K] = (d.mean(), d.std(ddof=1) / np.sqrt(d.size))
        ks = [1, 3, 10, 30]
        for lo, hi in zip(ks, ks[1:]):
            m_lo, se_lo = stats[lo]
            m_hi, se_hi = stats[hi]
            assert m_hi >= m_lo - 2 * np.hypot(se_lo, se_hi)
