"""Covariance-regime segmentation of functional data.

A single observed curve is modeled as a Gaussian process whose covariance
structure switches between M regimes according to a continuous-time hidden
Markov state process.  Fitting is by a Gibbs sampler whose state-path move
proposes whole paths from a smoothed approximation of the pointwise state
probabilities.
"""

from ._backend import BACKEND
from .errors import DomainError, FrvsError, InputError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DomainError",
    "FrvsError",
    "InputError",
    "NumericalError",
    "__version__",
]
