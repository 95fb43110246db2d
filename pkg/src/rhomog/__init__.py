"""Periodic homogenization of reflected generalized BSDEs with obstacles.

Modules: ``expr`` (expression language), ``geometry`` (convex domains),
``problem`` (problem data and assumption checks), ``cell`` (torus cell
problem and effective tensors), ``sde`` (reflected forward paths),
``bsde`` (backward schemes), ``pde`` (1-d finite-difference oracle) and
``harness`` (sweeps and reports).
"""

from .errors import NumericalError, RhomogError, ValidationError
from .problem import TwoScaleProblem, load_problem, validate_assumptions

__version__ = "0.1.0"

__all__ = ["NumericalError", "RhomogError", "TwoScaleProblem", "ValidationError",
           "load_problem", "validate_assumptions", "__version__"]
