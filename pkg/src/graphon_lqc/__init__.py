"""Linear-quadratic control of graphon mean-field systems with common noise."""

from .kernels import LabelGrid, LabelField, MatrixKernel
from .model import ModelError, ProblemSpec, TimeGrid, validate
from .riccati import RiccatiError, RiccatiSolution, solve_backward, value_function

__all__ = [
    "LabelGrid", "LabelField", "MatrixKernel",
    "ModelError", "ProblemSpec", "TimeGrid", "validate",
    "RiccatiError", "RiccatiSolution", "solve_backward", "value_function",
]
__version__ = "0.1.0"
