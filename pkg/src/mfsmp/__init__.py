"""Mean-field stochastic maximum principle toolkit."""

from .adjoint import AdjointSolution, RegressionBasis, regress_conditional, solve_first_order, solve_second_order
from .config import Fixture, load_fixture
from .fixtures import get_fixture
from .forward import BlowUpError, ControlProcess, ParticlePathEnsemble, TimeGrid, moment_bound_check, simulate
from .measure import EmpiricalMeasure, MomentBasis, empirical_from_samples, lions_bundle, moment_vector, wasserstein2
from .problem import ControlSet, MomentCoupledFunction, ProblemSpec, eval_coefficient, eval_derivatives, validate_problem

__all__ = [
    "AdjointSolution",
    "BlowUpError",
    "ControlProcess",
    "ControlSet",
    "EmpiricalMeasure",
    "Fixture",
    "MomentBasis",
    "MomentCoupledFunction",
    "ParticlePathEnsemble",
    "ProblemSpec",
    "RegressionBasis",
    "TimeGrid",
    "empirical_from_samples",
    "eval_coefficient",
    "eval_derivatives",
    "get_fixture",
    "lions_bundle",
    "load_fixture",
    "moment_bound_check",
    "moment_vector",
    "regress_conditional",
    "simulate",
    "solve_first_order",
    "solve_second_order",
    "validate_problem",
    "wasserstein2",
]

__version__ = "0.1.0"
