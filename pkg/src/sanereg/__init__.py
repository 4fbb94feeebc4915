"""Sanity-checked deformable image registration on regular grids."""

from .grid import ShapeError, back_project, jacobian_determinants, warp_image, warp_labels
from .losses import SanityConfig, total_loss
from .registration import DivergenceError, TinyNet, infer, register_pair_direct, train_model
from .synth import DegenerateRequest, make_dataset, make_pair

__version__ = "0.1.0"
