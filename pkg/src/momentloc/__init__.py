"""Desk-scale temporal grounding of language queries in videos.

A float64 autodiff engine, a multi-scale cross-modal encoder, an anchor-guided
moment decoder, synthetic planted-moment data, and recall/IoU evaluation,
trainable end to end on a CPU.
"""

from .autodiff import Tensor, backward, finite_difference_check, primitive_forward

__all__ = ["Tensor", "backward", "finite_difference_check", "primitive_forward"]
__version__ = "0.1.0"
