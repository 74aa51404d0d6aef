"""Real-time background matting with error-guided patch refinement."""

from mattekit.image import (
    AlphaMatte,
    ErrorMap,
    ForegroundResidual,
    Image,
    composite,
    recover_foreground,
    resize,
)

__version__ = "0.1.0"

__all__ = [
    "AlphaMatte",
    "ErrorMap",
    "ForegroundResidual",
    "Image",
    "composite",
    "recover_foreground",
    "resize",
    "__version__",
]
