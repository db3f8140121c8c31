"""One-shot visual identification: pairwise same/different decisions from
a single reference view, with merged-input CNNs, siamese towers, and
capsule variants."""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, FormatError, NumericError,
                     ShapeError, StateError, TapeError)
from .tensor import Tape, Tensor, backward

__all__ = [
    "__version__",
    "ConfigError", "DataError", "FormatError", "NumericError",
    "ShapeError", "StateError", "TapeError",
    "Tape", "Tensor", "backward",
]
