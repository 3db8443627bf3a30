"""Lagrangian dynamics and coordinate-aware VAEs for planar rigid bodies."""
from .systems import SystemSpec, make_system

__version__ = "0.1.0"
__all__ = ["SystemSpec", "make_system", "__version__"]
