"""Bridged treatment comparisons across two randomized trials sharing an arm.

The pipeline: load a fused two-trial dataset, fit nuisance models (treatment
assignment, drop-out, trial membership), estimate inverse-probability-
weighted risk curves per trial and arm, telescope the two within-trial risk
differences into the cross-trial contrast, check the fusion by comparing the
shared arms (area-between-curves permutation test, covariate balance), and
attach bootstrap confidence bands. A simulation harness measures the
operating characteristics of the whole procedure.
"""

__version__ = "0.1.0"

from .data import (
    CovariateSpec,
    DatasetSchema,
    FusedDataset,
    SubjectRecord,
    load_dataset,
    restrict,
    write_dataset,
)
from .design import DesignSpec, SplineSpec, parse_formula, spline_basis
from .errors import TrialBridgeError
from .estimator import (
    BridgedEstimate,
    NuisanceFits,
    PipelineConfig,
    RiskCurve,
    RiskDifferenceCurve,
    WeightSet,
    bridged_estimate,
    bridged_rd,
    compute_weights,
    fit_nuisance,
    ipw_risk,
    risk_difference,
    sampling_odds_weights,
    weighted_n_bridge,
)
from .models import (
    CoxFit,
    LogisticFit,
    censoring_survival,
    fit_cox,
    fit_logistic,
    nelson_aalen,
    predict_prob,
)
from .diagnostics import (
    PermutationResult,
    area_between,
    covariate_balance,
    permutation_test,
    twister_export,
)
from .bootstrap import BootstrapResult, BootstrapSpec, bootstrap_rd, bootstrap_shared_rd
from .simulation import (
    DgpParams,
    ScenarioConfig,
    ScenarioMetrics,
    ScenarioResult,
    generate_population,
    run_scenario,
    sample_trials,
    true_rd,
    true_rd_curve,
)
from .stepfun import StepFunction

__all__ = [
    "__version__",
    "BridgedEstimate",
    "BootstrapResult",
    "BootstrapSpec",
    "CovariateSpec",
    "CoxFit",
    "DatasetSchema",
    "DesignSpec",
    "DgpParams",
    "FusedDataset",
    "LogisticFit",
    "NuisanceFits",
    "PermutationResult",
    "PipelineConfig",
    "RiskCurve",
    "RiskDifferenceCurve",
    "ScenarioConfig",
    "ScenarioMetrics",
    "ScenarioResult",
    "SplineSpec",
    "StepFunction",
    "SubjectRecord",
    "TrialBridgeError",
    "WeightSet",
    "area_between",
    "bootstrap_rd",
    "bootstrap_shared_rd",
    "bridged_estimate",
    "bridged_rd",
    "censoring_survival",
    "compute_weights",
    "covariate_balance",
    "fit_cox",
    "fit_logistic",
    "fit_nuisance",
    "generate_population",
    "ipw_risk",
    "load_dataset",
    "nelson_aalen",
    "parse_formula",
    "permutation_test",
    "predict_prob",
    "restrict",
    "risk_difference",
    "run_scenario",
    "sample_trials",
    "sampling_odds_weights",
    "spline_basis",
    "true_rd",
    "true_rd_curve",
    "twister_export",
    "weighted_n_bridge",
    "write_dataset",
]
