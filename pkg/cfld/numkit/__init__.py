"""Minimal numpy tensor kernel with reverse-mode autodiff."""

from cfld.numkit import ops
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor, as_tensor, backward, check_mode, no_grad, shape_only

__all__ = ["Rng", "Tensor", "as_tensor", "backward", "check_mode", "no_grad", "ops", "shape_only"]
