"""Discrete-time backward stochastic LQ control on a binary noise tree."""

from .errors import (
    AssumptionError,
    BSLQError,
    DepthError,
    NumericalError,
    SpecParseError,
    StructureError,
)
from .problem import (
    ProblemSpec,
    ValidationReport,
    dumps_spec,
    example_spec,
    load_spec,
    random_spec,
    validate_spec,
)
from .solver import FeedbackSolution, ValueVariant, solve
from .tree import AdaptedProcess, TreeSpace, cond_pair

__version__ = "0.1.0"

__all__ = [
    "AdaptedProcess",
    "AssumptionError",
    "BSLQError",
    "DepthError",
    "FeedbackSolution",
    "NumericalError",
    "ProblemSpec",
    "SpecParseError",
    "StructureError",
    "TreeSpace",
    "ValidationReport",
    "ValueVariant",
    "cond_pair",
    "dumps_spec",
    "example_spec",
    "load_spec",
    "random_spec",
    "solve",
    "validate_spec",
    "__version__",
]
