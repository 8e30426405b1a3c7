"""Dataset reduction with synthesized privileged information.

Select or distill a small dataset from a larger one, synthesize feature,
attention and soft labels for it, then train and evaluate models on the
enriched reduced dataset.
"""

from drupi import tape
from drupi.tape import (
    Tape,
    Var,
    TapeError,
    ShapeError,
    NonFiniteError,
    forward,
    backward,
    grad_of_grad,
    grad_values,
    sgd_step,
)

__all__ = [
    "tape",
    "Tape",
    "Var",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "forward",
    "backward",
    "grad_of_grad",
    "grad_values",
    "sgd_step",
]

__version__ = "0.1.0"
