from .backward import BackwardResult, fit_backward, fitted_policy
from .fitting import FitConfig, FitResult, fit, fit_beta_mde, fit_gamma_mde, fit_ml, sandwich
from .losses import (
    Exponential,
    OutcomeFamily,
    Poisson,
    StageDesign,
    beta_loss,
    ekl_loss,
    gamma_estimating_function,
    gamma_loss,
    ml_estimating_function,
    ml_loss,
    stage_design,
)
from .propensity import PropensityModel, fit_propensity, with_fitted_propensities

__all__ = [
    "BackwardResult",
    "Exponential",
    "FitConfig",
    "FitResult",
    "OutcomeFamily",
    "Poisson",
    "PropensityModel",
    "StageDesign",
    "beta_loss",
    "ekl_loss",
    "fit",
    "fit_backward",
    "fit_beta_mde",
    "fit_gamma_mde",
    "fit_ml",
    "fit_propensity",
    "fitted_policy",
    "gamma_estimating_function",
    "gamma_loss",
    "ml_estimating_function",
    "ml_loss",
    "sandwich",
    "stage_design",
    "with_fitted_propensities",
]
