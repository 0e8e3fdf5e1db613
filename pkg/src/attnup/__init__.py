"""Attention-based image upsampling.

A numpy/numba implementation of masked cross-resolution attention as a
drop-in replacement for strided transposed convolution, plus the training
and evaluation machinery to use it for single-image super-resolution and
guided depth upsampling.
"""

from .core import EmptyWindowError, Rng, Tensor, conv1x1, conv2d, make_rng, softmax_masked

__version__ = "0.1.0"

__all__ = [
    "EmptyWindowError",
    "Rng",
    "Tensor",
    "conv1x1",
    "conv2d",
    "make_rng",
    "softmax_masked",
    "__version__",
]
