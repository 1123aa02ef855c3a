"""Federated calibration of a common parametric insurance index over Tweedie GLM losses."""

from fedindex.tweedie import (
    TweedieParams,
    deviance_dmu,
    scaled_deviance,
    tweedie_sample,
    unit_deviance,
)
from fedindex.index_model import (
    IndexCoefficients,
    Observation,
    ProducerDataset,
    index_value,
    local_risk,
    local_risk_gradient,
    mean_response,
    prox_local_risk_gradient,
)
from fedindex.federated import (
    AggregatorConfig,
    DivergenceError,
    FedOptConfig,
    LocalUpdateConfig,
    RoundTrace,
    ServerState,
    aggregate_fedavg,
    fedopt_step,
    global_loss,
    local_update,
    pseudo_gradient,
    run_round,
    run_training,
)
from fedindex.synth import (
    CovariateModel,
    PopulationSpec,
    generate_population,
    generate_producer,
    sample_covariates,
)
from fedindex.evaluation import (
    BasisRiskReport,
    BinnedConditionalMean,
    IterationCapReached,
    MonteCarloSummary,
    basis_risk,
    centralized_fit,
    conditional_mean_estimator,
    monte_carlo,
    recovery_error,
)
from fedindex.estimator import CentralizedIndexRegressor, FederatedIndexRegressor

__version__ = "0.1.0"

__all__ = [
    "AggregatorConfig",
    "BasisRiskReport",
    "BinnedConditionalMean",
    "CentralizedIndexRegressor",
    "CovariateModel",
    "DivergenceError",
    "FedOptConfig",
    "FederatedIndexRegressor",
    "IndexCoefficients",
    "IterationCapReached",
    "LocalUpdateConfig",
    "MonteCarloSummary",
    "Observation",
    "PopulationSpec",
    "ProducerDataset",
    "RoundTrace",
    "ServerState",
    "TweedieParams",
    "aggregate_fedavg",
    "basis_risk",
    "centralized_fit",
    "conditional_mean_estimator",
    "deviance_dmu",
    "fedopt_step",
    "generate_population",
    "generate_producer",
    "global_loss",
    "index_value",
    "local_risk",
    "local_risk_gradient",
    "local_update",
    "mean_response",
    "monte_carlo",
    "prox_local_risk_gradient",
    "pseudo_gradient",
    "recovery_error",
    "run_round",
    "run_training",
    "sample_covariates",
    "scaled_deviance",
    "tweedie_sample",
    "unit_deviance",
]
