"""moevit: a lightweight mixture-of-experts vision transformer on a numpy autodiff core."""

from .autodiff import Tensor, no_grad
from .errors import CheckpointError, ConfigError, DataError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "ShapeError",
    "ConfigError",
    "CheckpointError",
    "DataError",
    "__version__",
]
