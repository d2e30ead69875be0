"""Unbiased score-function gradient estimation for factorial Bernoulli models.

The library provides single-sample gradient estimators for objectives of the
form E_{z ~ prod Bernoulli(theta_i)}[f(z)], an exact enumeration oracle, a
gradient-variance laboratory, stochastic optimizers in both theta and logit
parameterizations, and a CLI that runs the desk-scale experiments.
"""

from berngrad.core import (
    BinaryVec,
    CoupledDraw,
    GradEstimate,
    LogitVec,
    RngStream,
    ThetaVec,
    coupled_from_uniforms,
    logit_transform,
    sample_coupled,
    sigmoid_transform,
)

__all__ = [
    "BinaryVec",
    "CoupledDraw",
    "GradEstimate",
    "LogitVec",
    "RngStream",
    "ThetaVec",
    "coupled_from_uniforms",
    "logit_transform",
    "sample_coupled",
    "sigmoid_transform",
]

__version__ = "0.1.0"
