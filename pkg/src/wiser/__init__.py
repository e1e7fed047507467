"""wiser: a dependency-light two-branch CNN workbench.

A wide residual branch and a full-width "slice" convolution branch,
fused by feature concatenation, trained with tape-based reverse-mode
differentiation and momentum SGD, on exactly reproducible seeded
randomness.  See the README for the CLI and file formats.
"""

from .autograd import Tape, TapeError, TapeNode, backward, grad_check
from .model import (MODES, SliceSpec, WiserModel, WiserModelSpec,
                    parameter_count, param_shapes)
from .optim import DivergenceError, SgdConfig, SgdState, lr_at, sgd_step, train_loop
from .rng import Stream
from .tensor import ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "MODES", "DivergenceError", "SgdConfig", "SgdState", "ShapeError",
    "SliceSpec", "Stream", "Tape", "TapeError", "TapeNode", "Tensor",
    "WiserModel", "WiserModelSpec", "backward", "grad_check", "lr_at",
    "parameter_count", "param_shapes", "sgd_step", "train_loop", "__version__",
]
