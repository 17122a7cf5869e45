"""smalldet: a desk-scale small-target detection engine.

Self-contained numeric core (NCHW tensors with reverse-mode differentiation),
the detector building blocks (space-to-depth convolution, cross-stage pyramid
pooling, three-scale anchor-free heads), config-driven graph assembly,
SGD training with early stopping, and precision/recall/mAP evaluation.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    NumericalError,
    ParseError,
    ShapeError,
    SmalldetError,
    UnsupportedOpError,
)
from .tensor import Tensor, precision, set_default_dtype

__all__ = [
    "Tensor",
    "precision",
    "set_default_dtype",
    "SmalldetError",
    "ConfigError",
    "ShapeError",
    "ParseError",
    "FormatError",
    "ContractError",
    "UnsupportedOpError",
    "NumericalError",
    "__version__",
]
