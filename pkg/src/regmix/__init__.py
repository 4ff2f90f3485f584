"""Estimation and diagnostics for finite mixtures of regression models."""

from ._version import __version__
from .kernels import Binomial, NegativeBinomial, NormalFixedVariance, NormalMeanVariance, Poisson
from .links import Constant, LogLinear, Polynomial, PowerProduct, SigmoidLinear, SumLink, TrigPolynomial
from .measures import Box, MixingMeasure, perturb, wasserstein, wasserstein_distance
from .model import Dataset, LogUniform, MixtureRegressionModel, Uniform

__all__ = [
    "__version__",
    "Binomial",
    "Box",
    "Constant",
    "Dataset",
    "LogLinear",
    "LogUniform",
    "MixingMeasure",
    "MixtureRegressionModel",
    "NegativeBinomial",
    "NormalFixedVariance",
    "NormalMeanVariance",
    "Poisson",
    "Polynomial",
    "PowerProduct",
    "SigmoidLinear",
    "SumLink",
    "TrigPolynomial",
    "Uniform",
    "perturb",
    "wasserstein",
    "wasserstein_distance",
]
