"""Distribution kernel: sampling, log-density, closed-form parameter gradients.

Four families cover every model in the package: Normal (scalar or
diagonal-vector), Categorical over a finite support, Bernoulli, and
NegativeBinomial in the (total-count, logit) parameterisation.

Gradients are taken with respect to the unconstrained parameterisation
(mean, log-variance, logits, unnormalised log-weights) so optimizers can
run without projections. Parameters may be plain arrays (constants) or
`ParamRef`s naming a store entry; `param_entries` exposes the mapping so
update rules can route per-entry partials into the right gradients.

All operations broadcast: parameters and values may carry arbitrary
leading batch axes (particle grids, plates). `event_ndim` on Normal marks
trailing value axes that are summed into a single log-density.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import digamma, gammaln

from .errors import ParameterError
from .params import ref_name, ref_value

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

_warned_weight_sums: set = set()


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_sigmoid(x):
    # log sigma(x) = -softplus(-x), stable on both tails
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise ParameterError(f"{name} must be finite")


class Distribution:
    """Common interface; concrete families implement the abstract pieces."""

    kind: str

    def log_prob(self, x) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, shape: tuple | None = None) -> np.ndarray:
        """Draw with the given full output shape (event dims included).

        Parameters broadcast against `shape`; None means the parameters'
        natural broadcast shape.
        """
        raise NotImplementedError

    def grad_log_prob(self, x) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def param_entries(self):
        """(unconstrained-name, value, store-key-or-None) per parameter."""
        raise NotImplementedError


class Normal(Distribution):
    """Independent normal over scalars or (with event_ndim=1) vectors.

    Pass either `var` (positive, treated as a constant unless `log_var`
    is used) or `log_var` (the unconstrained parameter, may be a ParamRef).
    """

    kind = "normal"

    def __init__(self, mean, var=None, *, log_var=None, event_ndim: int = 0):
        if (var is None) == (log_var is None):
            raise ParameterError("Normal requires exactly one of var, log_var")
        self._mean_key = ref_name(mean)
        self.mean = np.asarray(ref_value(mean), dtype=np.float64)
        if var is not None:
            var = np.asarray(ref_value(var), dtype=np.float64)
            if not np.all(var > 0):  # also catches NaN
                raise ParameterError("Normal variance must be > 0")
            self._logvar_key = None
            self.log_var = np.log(var)
            self.var = var
        else:
            self._logvar_key = ref_name(log_var)
            self.log_var = np.asarray(ref_value(log_var), dtype=np.float64)
            _check_finite("Normal log-variance", self.log_var)
            self.var = np.exp(self.log_var)
        self.event_ndim = event_ndim

    def _elem_log_prob(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = np.asarray(x - self.mean)
        if self.var.size == 1:  # one fresh temp instead of four
            np.multiply(d, d, out=d)
            np.multiply(d, -0.5 / float(self.var), out=d)
            d -= 0.5 * (LOG_2PI + float(self.log_var))
            return d
        return -0.5 * (LOG_2PI + self.log_var + d * d / self.var)

    def log_prob(self, x):
        ev = self.event_ndim
        if ev:
            # when the variance is constant across event dims, sum squared
            # deviations first and divide once: exact, and avoids blowing
            # the elementwise grid up by the variance's broadcast axes
            var_tail = self.var.shape[-ev:] if self.var.ndim >= ev else ()
            if all(s == 1 for s in var_tail):
                x = np.asarray(x, dtype=np.float64)
                d = np.asarray(x - self.mean)
                np.multiply(d, d, out=d)
                ss = d.sum(axis=tuple(range(-ev, 0)))
                n = int(np.prod(d.shape[-ev:]))
                var = self.var.reshape(self.var.shape[:-ev] or ()) if self.var.ndim >= ev else self.var
                log_var = (
                    self.log_var.reshape(self.log_var.shape[:-ev] or ())
                    if self.log_var.ndim >= ev else self.log_var
                )
                return -0.5 * (n * (LOG_2PI + log_var) + ss / var)
            lp = self._elem_log_prob(x)
            return lp.sum(axis=tuple(range(-ev, 0)))
        return self._elem_log_prob(x)

    def sample(self, rng, shape=None):
        if shape is None:
            shape = np.broadcast_shapes(self.mean.shape, self.var.shape)
        return rng.normal(self.mean, np.sqrt(self.var), size=shape)

    def grad_log_prob(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = (x - self.mean) / self.var
        return {"mean": d, "log_var": 0.5 * (d * (x - self.mean) - 1.0)}

    def param_entries(self):
        return [("mean", self.mean, self._mean_key), ("log_var", self.log_var, self._logvar_key)]


class Categorical(Distribution):
    """Finite support {0..S-1}; parameterised by unnormalised log-weights.

    Linear `weights` are normalised at construction; a weight vector whose
    sum is off by more than 1e-9 logs a warning, since that usually means
    the model definition contains a typo.
    """

    kind = "categorical"

    def __init__(self, weights=None, *, logits=None):
        if (weights is None) == (logits is None):
            raise ParameterError("Categorical requires exactly one of weights, logits")
        if weights is not None:
            w = np.asarray(ref_value(weights), dtype=np.float64)
            _check_finite("Categorical weights", w)
            if np.any(w < 0):
                raise ParameterError("Categorical weights must be >= 0")
            total = w.sum(axis=-1, keepdims=True)
            if np.any(total <= 0):
                raise ParameterError("Categorical weights must have positive sum")
            if np.any(np.abs(total - 1.0) > 1e-9):
                key = tuple(np.unique(total.round(12)))
                if key not in _warned_weight_sums:  # warn once per distinct sum
                    _warned_weight_sums.add(key)
                    logger.warning("categorical weights sum to %s; normalizing", list(key))
            self._logits_key = None
            with np.errstate(divide="ignore"):
                self.logits = np.log(w / total)
        else:
            self._logits_key = ref_name(logits)
            self.logits = np.asarray(ref_value(logits), dtype=np.float64)
            if np.isnan(self.logits).any() or np.isposinf(self.logits).any():
                raise ParameterError("Categorical logits must be finite or -inf")
        self.support_size = self.logits.shape[-1]

    def _log_norm(self):
        m = self.logits.max(axis=-1, keepdims=True)
        return np.log(np.exp(self.logits - m).sum(axis=-1, keepdims=True)) + m

    def log_prob(self, x):
        x = np.asarray(x)
        xi = np.asarray(x, dtype=np.int64)
        valid = (x == xi) & (xi >= 0) & (xi < self.support_size)
        norm = self.logits - self._log_norm()
        idx = np.where(valid, xi, 0)
        bshape = np.broadcast_shapes(idx.shape, norm.shape[:-1])
        idx_b = np.broadcast_to(idx, bshape)
        norm_b = np.broadcast_to(norm, bshape + (self.support_size,))
        lp = np.take_along_axis(norm_b, idx_b[..., None], axis=-1)[..., 0]
        return np.where(np.broadcast_to(valid, bshape), lp, -np.inf)

    def sample(self, rng, shape=None):
        if shape is None:
            shape = self.logits.shape[:-1]
        g = rng.gumbel(size=tuple(shape) + (self.support_size,))
        return np.argmax(self.logits + g, axis=-1)

    def grad_log_prob(self, x):
        x = np.asarray(x, dtype=np.int64)
        p = np.exp(self.logits - self._log_norm())
        onehot = (x[..., None] == np.arange(self.support_size)).astype(np.float64)
        return {"logits": onehot - p}

    def param_entries(self):
        return [("logits", self.logits, self._logits_key)]


class Bernoulli(Distribution):
    """Binary outcome; unconstrained parameter is the logit."""

    kind = "bernoulli"

    def __init__(self, p=None, *, logit=None):
        if (p is None) == (logit is None):
            raise ParameterError("Bernoulli requires exactly one of p, logit")
        if p is not None:
            p = np.asarray(ref_value(p), dtype=np.float64)
            _check_finite("Bernoulli probability", p)
            if np.any(p <= 0) or np.any(p >= 1):
                raise ParameterError("Bernoulli probability must lie in (0, 1)")
            self._logit_key = None
            self.logit = np.log(p) - np.log1p(-p)
        else:
            self._logit_key = ref_name(logit)
            self.logit = np.asarray(ref_value(logit), dtype=np.float64)
            _check_finite("Bernoulli logit", self.logit)

    def log_prob(self, x):
        x = np.asarray(x)
        valid = (x == 0) | (x == 1)
        xf = np.asarray(x, dtype=np.float64)
        lp = xf * _log_sigmoid(self.logit) + (1.0 - xf) * _log_sigmoid(-self.logit)
        return np.where(valid, lp, -np.inf)

    def sample(self, rng, shape=None):
        if shape is None:
            shape = self.logit.shape
        return (rng.random(tuple(shape)) < _sigmoid(self.logit)).astype(np.int64)

    def grad_log_prob(self, x):
        return {"logit": np.asarray(x, dtype=np.float64) - _sigmoid(self.logit)}

    def param_entries(self):
        return [("logit", self.logit, self._logit_key)]


class NegativeBinomial(Distribution):
    """Counts with mass proportional to C(x+r-1, x) sigma(l)^x sigma(-l)^r.

    `total_count` r > 0 (unconstrained form log r), `logit` l. The mean is
    r * exp(l).
    """

    kind = "negative_binomial"

    def __init__(self, total_count, logit):
        self._count_key = ref_name(total_count)
        tc = ref_value(total_count)
        if self._count_key is not None:
            # the store carries the unconstrained log of the count
            self.log_total_count = np.asarray(tc, dtype=np.float64)
            self.total_count = np.exp(self.log_total_count)
        else:
            self.total_count = np.asarray(tc, dtype=np.float64)
            _check_finite("NegativeBinomial total_count", self.total_count)
            if np.any(self.total_count <= 0):
                raise ParameterError("NegativeBinomial total_count must be > 0")
            self.log_total_count = np.log(self.total_count)
        self._logit_key = ref_name(logit)
        self.logit = np.asarray(ref_value(logit), dtype=np.float64)
        _check_finite("NegativeBinomial logit", self.logit)

    def log_prob(self, x):
        x = np.asarray(x)
        xi = np.asarray(x, dtype=np.int64)
        valid = (x == xi) & (xi >= 0)
        xf = np.where(valid, xi, 0).astype(np.float64)
        r = self.total_count
        lp = (
            gammaln(xf + r)
            - gammaln(r)
            - gammaln(xf + 1.0)
            + xf * _log_sigmoid(self.logit)
            + r * _log_sigmoid(-self.logit)
        )
        return np.where(valid, lp, -np.inf)

    def sample(self, rng, shape=None):
        if shape is None:
            shape = np.broadcast_shapes(self.total_count.shape, self.logit.shape)
        shape = tuple(shape)
        # numpy counts failures, each occurring with probability 1 - p;
        # our failure probability is sigma(logit), so p = sigma(-logit)
        return rng.negative_binomial(
            np.broadcast_to(self.total_count, shape),
            _sigmoid(np.broadcast_to(-self.logit, shape)),
        )

    def grad_log_prob(self, x):
        xf = np.asarray(x, dtype=np.float64)
        r = self.total_count
        dlogit = xf * _sigmoid(-self.logit) - r * _sigmoid(self.logit)
        dlogr = r * (digamma(xf + r) - digamma(r) + _log_sigmoid(-self.logit))
        return {"logit": dlogit, "log_total_count": dlogr}

    def param_entries(self):
        return [
            ("log_total_count", self.log_total_count, self._count_key),
            ("logit", self.logit, self._logit_key),
        ]
