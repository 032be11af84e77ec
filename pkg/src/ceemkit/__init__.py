"""Numpy CNN toolkit with an edge-enhancing complement branch for chest X-ray classification."""

from .errors import CeemError
from .graph import ModelGraph, build_preset

__version__ = "0.1.0"
__all__ = ["CeemError", "ModelGraph", "build_preset", "__version__"]
