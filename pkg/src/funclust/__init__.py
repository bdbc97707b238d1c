"""Model-based clustering of sampled curves with optional scalar covariates."""

from .emfit import FitConfig, FitReport, e_step, fit, init_params, m_step_cov, m_step_nocov
from .mixmodel import CurveData, MeanStructure, ModelParams, PosteriorTable, observed_loglik
from .preprocess import CurveObservation, RawSeries, prepare_all
from .splinebasis import DEFAULT_BASIS, BasisSpec

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "CurveData",
    "CurveObservation",
    "DEFAULT_BASIS",
    "FitConfig",
    "FitReport",
    "MeanStructure",
    "ModelParams",
    "PosteriorTable",
    "RawSeries",
    "e_step",
    "fit",
    "init_params",
    "m_step_cov",
    "m_step_nocov",
    "observed_loglik",
    "prepare_all",
]
