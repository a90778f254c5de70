"""Feed-forward 4D Gaussian reconstruction for surround-view driving scenes.

Desk-scale pipeline: synthetic scene generation, a convolutional predictor
with prune-and-dilate feature clustering, a differentiable Gaussian
splatting renderer, and decoupled static/dynamic cross-temporal losses.
"""

from gs4d.tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
