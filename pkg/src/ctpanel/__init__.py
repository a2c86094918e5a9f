"""Causal effects of continuous treatments in fixed-effects panels.

Fixed-effects causal models with strictly or sequentially exogenous errors
(estimated by two-way fixed effects or first-difference GMM), plug-in
estimands such as average causal response functions, analytical and
bootstrap inference, a simulation harness and a causal-graph checker.
"""
__version__ = "0.1.0"

from .dag import (
    Dag,
    backdoor_satisfied,
    builtin_dag,
    check_scia,
    d_separated,
    is_blocked,
    load_dag,
    parse_dag,
)
from .errors import (
    CtPanelError,
    DegenerateVarianceWarning,
    EstimationError,
    UserInputError,
)
from .estimands import (
    EstimandSpec,
    acr_at,
    acrw_star,
    acrw_t,
    ate_t,
    atew,
    build_form,
    report,
)
from .estimators import ModelSpec, estimate_gmm, estimate_twfe, fit
from .inference import ParamTarget, analytical_variance, bootstrap, hansen_j, parameter_se
from .panel import (
    PanelDataset,
    PanelSchema,
    cross_demean,
    first_difference,
    load_panel,
    within_two_way,
)
from .simulate import DgpSpec, McConfig, generate, mc_experiment, oracle_truth
from .tau import BUILTIN_FAMILIES, TauSpec, builtin_spec, parse_tau

__all__ = [
    "__version__",
    "PanelDataset", "PanelSchema", "load_panel", "first_difference", "cross_demean",
    "within_two_way",
    "TauSpec", "BUILTIN_FAMILIES", "builtin_spec", "parse_tau",
    "ModelSpec", "fit", "estimate_twfe", "estimate_gmm",
    "EstimandSpec", "build_form", "report", "acr_at", "acrw_t", "acrw_star", "ate_t", "atew",
    "analytical_variance", "bootstrap", "ParamTarget", "parameter_se", "hansen_j",
    "Dag", "parse_dag", "load_dag", "builtin_dag", "is_blocked", "d_separated", "backdoor_satisfied", "check_scia",
    "DgpSpec", "McConfig", "generate", "mc_experiment", "oracle_truth",
    "CtPanelError", "UserInputError", "EstimationError", "DegenerateVarianceWarning",
]
