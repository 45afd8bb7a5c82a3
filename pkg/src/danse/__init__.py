"""Domain-adversarial neural speaker embeddings on a minimal autodiff tape."""

from danse.autodiff import Tensor, Tape, grad_check

__all__ = ["Tensor", "Tape", "grad_check"]
__version__ = "0.1.0"
