"""Bayesian calibration of explanatory multidimensional IRT models on sparse data."""

from .diagnostics import FitReport, gelman_rubin, posterior_predictive_check, waic
from .errors import DiagnosticError, DomainError, NumericalError, ValidationError
from .families import get_family, log_likelihood, to_natural, to_unconstrained
from .model import BlockSpec, LinkageIndex, ResponseData, ResponseRecord, Unit, build_linkage
from .regression import BlockDesign, PriorSpec, RegressionParams
from .sampler import (
    CalibrationData,
    Constraints,
    GibbsSampler,
    PosteriorSamples,
    RegressionFix,
    SamplerConfig,
    run,
)

__all__ = [
    "BlockDesign",
    "BlockSpec",
    "CalibrationData",
    "Constraints",
    "DiagnosticError",
    "DomainError",
    "FitReport",
    "GibbsSampler",
    "LinkageIndex",
    "NumericalError",
    "PosteriorSamples",
    "PriorSpec",
    "RegressionFix",
    "RegressionParams",
    "ResponseData",
    "ResponseRecord",
    "SamplerConfig",
    "Unit",
    "ValidationError",
    "build_linkage",
    "gelman_rubin",
    "get_family",
    "log_likelihood",
    "posterior_predictive_check",
    "run",
    "to_natural",
    "to_unconstrained",
    "waic",
]

__version__ = "0.1.0"
