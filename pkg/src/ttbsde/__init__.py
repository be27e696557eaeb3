"""Backward solvers for semilinear parabolic PDEs with functional tensor trains.

The value function is approximated on each time step by a tensor train in a
tensor-product polynomial basis, fitted by alternating least squares against
regression targets built from Euler-Maruyama paths.
"""

from .basis import PolynomialBasis
from .functional import FunctionalTT
from .regression import AlsConfig, FitRecord, RegressionProblem, adapt_rank, als_fit, als_fit_grad
from .sde import PathEnsemble, PdeProblem, TimeGrid, simulate
from .solver import BackwardSolution, LossKind, SolverConfig, backward_solve
from .tensor import TensorTrain

__version__ = "0.1.0"

__all__ = [
    "AlsConfig", "BackwardSolution", "FitRecord", "FunctionalTT", "LossKind", "PathEnsemble",
    "PdeProblem", "PolynomialBasis", "RegressionProblem", "SolverConfig", "TensorTrain",
    "TimeGrid", "adapt_rank", "als_fit", "als_fit_grad", "backward_solve", "simulate",
]
