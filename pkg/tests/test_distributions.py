"""Distribution kernel tests: densities, sampling, parameter gradients.

Gradient checks use central finite differences; normalisation checks use
quadrature (continuous) or truncated summation with a bounded tail
(discrete); sampling checks use a G-test against the density.
"""

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from mpinfer.distributions import Bernoulli, Categorical, NegativeBinomial, Normal
from mpinfer.errors import ParameterError
from mpinfer.verify import distribution_gradient_errors


class TestLogProb:
    def test_standard_normal_at_zero(self):
        assert Normal(0.0, 1.0).log_prob(0.0) == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_bernoulli_half(self):
        assert Bernoulli(p=0.5).log_prob(1) == pytest.approx(np.log(0.5))

    def test_categorical_normalises_weight_vector(self):
        # the weight vector sums to 1.1 and must be renormalised
        d = Categorical(weights=[0.1, 0.5, 0.4, 0.05, 0.05])
        assert d.log_prob(1) == pytest.approx(np.log(0.5 / 1.1))
        assert np.exp([d.log_prob(i) for i in range(5)]).sum() == pytest.approx(1.0)

    def test_normal_analytic_value(self):
        d = Normal(1.0, 2.0)
        want = -0.5 * (np.log(2 * np.pi * 2.0) + (2.0 - 1.0) ** 2 / 2.0)
        assert d.log_prob(2.0) == pytest.approx(want)

    def test_discrete_out_of_support(self):
        assert Categorical(weights=[1, 0, 0]).log_prob(1) == -np.inf
        assert Categorical(weights=[0.5, 0.5]).log_prob(7) == -np.inf
        assert Bernoulli(p=0.3).log_prob(2) == -np.inf
        assert NegativeBinomial(3.0, 0.1).log_prob(-1) == -np.inf

    def test_vector_normal_sums_event(self):
        d = Normal(np.zeros(3), 1.0, event_ndim=1)
        assert d.log_prob(np.zeros(3)) == pytest.approx(-1.5 * np.log(2 * np.pi))

    def test_negative_binomial_vs_scipy(self):
        r, logit = 130.0, 0.4
        d = NegativeBinomial(r, logit)
        p_fail = 1.0 / (1.0 + np.exp(-logit))
        for x in (0, 5, 130, 400):
            want = stats.nbinom.logpmf(x, r, 1.0 - p_fail)
            assert d.log_prob(x) == pytest.approx(want, rel=1e-12)


class TestParameterValidation:
    def test_normal_variance_positive(self):
        with pytest.raises(ParameterError):
            Normal(0.0, 0.0)
        with pytest.raises(ParameterError):
            Normal(0.0, -1.0)

    def test_categorical_weights(self):
        with pytest.raises(ParameterError):
            Categorical(weights=[0.5, -0.1])
        with pytest.raises(ParameterError):
            Categorical(weights=[0.0, 0.0])

    def test_bernoulli_open_interval(self):
        with pytest.raises(ParameterError):
            Bernoulli(p=0.0)
        with pytest.raises(ParameterError):
            Bernoulli(p=1.0)

    def test_negative_binomial_count_positive(self):
        with pytest.raises(ParameterError):
            NegativeBinomial(0.0, 0.1)

    def test_exactly_one_parameterisation(self):
        with pytest.raises(ParameterError):
            Normal(0.0)
        with pytest.raises(ParameterError):
            Normal(0.0, 1.0, log_var=0.0)


class TestSampling:
    def test_normal_monte_carlo_mean(self):
        n = 100_000
        s = Normal(0.0, 1.0).sample(np.random.default_rng(0), (n,))
        assert abs(s.mean()) < 3.0 / np.sqrt(n)

    def test_degenerate_categorical(self):
        s = Categorical(weights=[1, 0, 0]).sample(np.random.default_rng(1), (50,))
        assert (s == 0).all()

    def test_seed_determinism(self):
        for make in (
            lambda: Normal(0.3, 2.0),
            lambda: Categorical(weights=[0.2, 0.8]),
            lambda: Bernoulli(p=0.4),
            lambda: NegativeBinomial(7.0, -0.2),
        ):
            a = make().sample(np.random.default_rng(42), (100,))
            b = make().sample(np.random.default_rng(42), (100,))
            np.testing.assert_array_equal(a, b)

    def test_negative_binomial_moments(self):
        r, logit = 130.0, 0.3
        n = 200_000
        s = NegativeBinomial(r, logit).sample(np.random.default_rng(2), (n,))
        mean = r * np.exp(logit)
        var = mean / (1.0 / (1.0 + np.exp(logit)))  # mean / sigma(-logit)
        assert abs(s.mean() - mean) < 4 * np.sqrt(var / n)

    def test_broadcast_sampling_is_independent(self):
        s = Normal(np.zeros((1, 3)), 1.0).sample(np.random.default_rng(3), (500, 4, 3))
        assert s.shape == (500, 4, 3)
        corr = np.corrcoef(s[:, 0, 0], s[:, 1, 0])[0, 1]
        assert abs(corr) < 0.15


class TestNormalisation:
    def test_normal_quadrature(self):
        mu, var = 0.7, 2.3
        d = Normal(mu, var)
        xs = np.linspace(mu - 10 * np.sqrt(var), mu + 10 * np.sqrt(var), 1_000_001)
        mass = np.trapezoid(np.exp(d.log_prob(xs)), xs)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_categorical_and_bernoulli_sum_to_one(self):
        c = Categorical(weights=[0.1, 0.5, 0.4, 0.05, 0.05])
        assert np.exp([c.log_prob(i) for i in range(5)]).sum() == pytest.approx(1.0, abs=1e-12)
        b = Bernoulli(p=0.37)
        assert np.exp([b.log_prob(0), b.log_prob(1)]).sum() == pytest.approx(1.0, abs=1e-12)

    def test_negative_binomial_truncated_sum(self):
        d = NegativeBinomial(130.0, 0.0)
        # extend the support until the remaining tail is below 1e-7
        xs = np.arange(0, 2000)
        pmf = np.exp(d.log_prob(xs))
        total = pmf.cumsum()
        cut = int(np.argmax(total > 1 - 1e-8))
        assert total[cut] > 1 - 1e-7
        assert 1 - 1e-6 <= total[cut] <= 1 + 1e-9


class TestGradients:
    def test_normal_mean_gradient_symmetry(self):
        g = Normal(0.0, 1.0).grad_log_prob(0.0)
        assert g["mean"] == pytest.approx(0.0)

    def test_normal_mean_gradient_analytic(self):
        g = Normal(1.0, 2.0).grad_log_prob(2.0)
        assert g["mean"] == pytest.approx(0.5)

    def test_negative_binomial_logit_fd(self):
        r, logit, x, h = 130.0, 0.37, 5, 1e-5
        g = NegativeBinomial(r, logit).grad_log_prob(x)["logit"]
        fd = (
            NegativeBinomial(r, logit + h).log_prob(x)
            - NegativeBinomial(r, logit - h).log_prob(x)
        ) / (2 * h)
        assert g == pytest.approx(fd, rel=1e-5)

    def test_all_kinds_match_finite_differences(self):
        worst = distribution_gradient_errors(seed=1, trials=100)
        for kind, err in worst.items():
            assert err <= 1e-5, f"{kind}: {err}"


class TestSampleDensityConsistency:
    """G-test between 1e5 samples and the density at significance 1e-3."""

    N = 100_000
    ALPHA = 1e-3

    def _gtest(self, counts, probs):
        counts = np.asarray(counts, dtype=np.float64)
        expected = probs * counts.sum()
        keep = expected > 5
        stat = 2.0 * np.sum(counts[keep] * np.log(counts[keep] / expected[keep]))
        dof = keep.sum() - 1
        return stats.chi2.sf(stat, dof)

    def test_categorical(self):
        w = np.array([0.1, 0.5, 0.4, 0.05, 0.05])
        d = Categorical(weights=w)
        s = d.sample(np.random.default_rng(10), (self.N,))
        counts = np.bincount(s, minlength=5)
        p = self._gtest(counts, w / w.sum())
        assert p > self.ALPHA

    def test_bernoulli(self):
        d = Bernoulli(p=0.37)
        s = d.sample(np.random.default_rng(11), (self.N,))
        p = self._gtest(np.bincount(s, minlength=2), np.array([0.63, 0.37]))
        assert p > self.ALPHA

    def test_normal_quantile_bins(self):
        d = Normal(0.4, 2.0)
        s = d.sample(np.random.default_rng(12), (self.N,))
        edges = 0.4 + np.sqrt(2.0) * stats.norm.ppf(np.linspace(0, 1, 41)[1:-1])
        counts = np.histogram(s, bins=np.concatenate([[-np.inf], edges, [np.inf]]))[0]
        p = self._gtest(counts, np.full(40, 1 / 40))
        assert p > self.ALPHA

    def test_negative_binomial(self):
        d = NegativeBinomial(9.0, -0.3)
        s = d.sample(np.random.default_rng(13), (self.N,))
        hi = int(s.max()) + 1
        counts = np.bincount(s, minlength=hi)
        logp = d.log_prob(np.arange(hi))
        probs = np.exp(logp - logsumexp(logp))
        p = self._gtest(counts, probs)
        assert p > self.ALPHA
