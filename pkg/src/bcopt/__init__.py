"""Bias-corrected stochastic preconditioned optimization.

Cross-fitted numerator/denominator estimation, delta-method and jackknife
inverse corrections, and eigenbasis inverse-root correction, instantiated
for AdamW-, Sophia-, and Shampoo-style optimizers, with a Monte Carlo lab
that measures the statistical claims directly.
"""

from . import biaslab, estimators, linalg, optimizers, problems
from .errors import BcoptError

__version__ = "0.1.0"

__all__ = ["BcoptError", "biaslab", "estimators", "linalg", "optimizers", "problems"]
