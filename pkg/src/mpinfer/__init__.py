"""Massively parallel importance-weighted inference and wake-sleep training.

Draw K particles per latent variable, reason over all K^n index
combinations with a polynomial-time log-space tensor contraction, and
train model and proposal parameters with self-normalised
importance-weighted updates.
"""

from .distributions import Bernoulli, Categorical, NegativeBinomial, Normal
from .errors import (
    CapabilityError,
    DataError,
    DegenerateEvidenceError,
    GraphError,
    MpinferError,
    ParameterError,
    PlanningError,
    ShapeError,
    StructureError,
)
from .estimator import (
    EvidenceEstimate,
    FactorSet,
    build_factors,
    factor_weights,
    log_evidence_global,
    log_evidence_mp,
    posterior_marginal,
    smc_log_evidence,
)
from .experiments import (
    Experiment,
    ExperimentSpec,
    build_bus,
    build_movielens,
    build_ts_multi,
    build_ts_single,
    exact_log_evidence,
    load_bus_delays,
    load_movielens_ratings,
    make_experiment,
    predictive_log_likelihood,
    predictive_log_likelihood_global,
    synthesize_data,
)
from .log_tensor import (
    Axis,
    ContractionPlan,
    LogFactor,
    Weights,
    execute,
    execute_keep,
    execute_with_marginals,
    k_axis,
    log_mul,
    plan_contraction,
    plate_axis,
    posterior_marginals,
    reduce,
)
from .model_graph import (
    DataDecl,
    Dataset,
    LatentDecl,
    ModelGraph,
    generate_synthetic,
    log_joint,
    validate,
)
from .params import GradientStore, ParamRef, ParamStore
from .proposals import (
    ProposalDecl,
    ProposalGraph,
    SampleBatch,
    mixture_log_density,
    sample_batch,
    sample_global,
    sample_mp,
    sample_tmc,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainTrace,
    adam_step,
    posterior_moment,
    rws_update,
    rws_update_global,
    train,
)

__version__ = "0.1.0"
