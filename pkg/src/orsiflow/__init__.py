"""Saliency-guided latent rectified flow on a numpy autodiff core."""

from .tensor import Tensor, Tape, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "no_grad", "__version__"]
