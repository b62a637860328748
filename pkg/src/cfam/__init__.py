"""Constrained functional additive models (CFAM) for individualized treatment rules."""
from .basis import LinearBasis, OrthonormalSplineBasis, SplineBasis, default_dim
from .design import FunctionalCovariate, Grid, TrialData, build_design, inner_product, null_space_basis
from .errors import CfamError, ConfigError, DataError, NoOverlapError, NumericalError
from .io import ModelArtifact, RunConfig, read_trial, write_trial
from .itr import Rule, ValueEstimate, decide, value_ipw, value_monte_carlo
from .solver import CfamFit, FitOptions, fit, fit_path, interaction_scores, predict_interaction
from .tuning import cross_validate, fit_cv, fit_pipeline, lambda_max, lambda_path, residualize

__version__ = "0.1.0"

__all__ = [
    "CfamError", "CfamFit", "ConfigError", "DataError", "FitOptions", "FunctionalCovariate", "Grid",
    "LinearBasis", "ModelArtifact", "NoOverlapError", "NumericalError", "OrthonormalSplineBasis", "Rule",
    "RunConfig", "SplineBasis", "TrialData", "ValueEstimate", "build_design", "cross_validate", "decide",
    "default_dim", "fit", "fit_cv", "fit_path", "fit_pipeline", "inner_product", "interaction_scores",
    "lambda_max", "lambda_path", "null_space_basis", "predict_interaction", "read_trial", "residualize",
    "value_ipw", "value_monte_carlo", "write_trial",
]
