"""Pointer-selection sequence models on a small numpy autodiff engine."""

import os

# Timed regions and float reductions are meant to be single-threaded; this
# only takes effect when numpy has not been imported yet.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .config import ModelConfig  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = ["ModelConfig", "Tensor", "no_grad", "__version__"]
