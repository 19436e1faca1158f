"""Sieve two-stage least squares for off-policy Q-function estimation."""

__version__ = "0.1.0"

from .basis import BasisSpec, eval_basis, eval_basis_deriv, gram_matrix, policy_basis
from .config import FitConfig, StudyConfig
from .diagnostics import (
    IllPosednessReport,
    check_contraction,
    check_ej_bound,
    check_wellposedness_l2,
    compute_report,
    project_onto_sieve,
)
from .distributions import (
    InitialDistribution,
    PointMassPolicy,
    TruncatedGaussianPolicy,
    TruncatedGaussianTransition,
    UniformPolicy,
)
from .errors import (
    CapabilityError,
    ConfigError,
    ConvergenceError,
    GenerationError,
    InputError,
    NumericalError,
    QSieveError,
    StudyError,
)
from .mdp import Dataset, MdpSpec, designed_q_mdp, sample_trajectories
from .npiv import (
    AssembledSystem,
    SieveFit,
    assemble,
    bellman_residual_norms,
    bootstrap_value_se,
    choose_J,
    fit_2sls,
    plugin_value,
    predict_q,
    predict_q_deriv,
)
from .oracle import OracleQ, StationaryLaw, apply_T, fixed_point_oracle, oracle_value

__all__ = [
    "AssembledSystem",
    "BasisSpec",
    "CapabilityError",
    "ConfigError",
    "ConvergenceError",
    "Dataset",
    "FitConfig",
    "GenerationError",
    "IllPosednessReport",
    "InitialDistribution",
    "InputError",
    "MdpSpec",
    "NumericalError",
    "OracleQ",
    "PointMassPolicy",
    "QSieveError",
    "SieveFit",
    "StationaryLaw",
    "StudyConfig",
    "StudyError",
    "TruncatedGaussianPolicy",
    "TruncatedGaussianTransition",
    "UniformPolicy",
    "apply_T",
    "assemble",
    "bellman_residual_norms",
    "bootstrap_value_se",
    "check_contraction",
    "check_ej_bound",
    "check_wellposedness_l2",
    "choose_J",
    "compute_report",
    "designed_q_mdp",
    "eval_basis",
    "eval_basis_deriv",
    "fit_2sls",
    "fixed_point_oracle",
    "gram_matrix",
    "oracle_value",
    "plugin_value",
    "policy_basis",
    "predict_q",
    "predict_q_deriv",
    "project_onto_sieve",
    "sample_trajectories",
]
