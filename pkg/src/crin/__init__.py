"""CRIN: collaborative building-road extraction with cross-task and
cross-scale interaction, on a minimal numpy autograd core."""

__version__ = "0.1.0"

from .tensor import Tensor, ConvSpec
from .autograd import Tape, backward, grad_check

__all__ = ["Tensor", "ConvSpec", "Tape", "backward", "grad_check",
           "__version__"]
