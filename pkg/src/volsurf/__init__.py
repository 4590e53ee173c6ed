"""Implied-volatility surface reconstruction toolkit."""
from .errors import VolSurfError

__version__ = "0.1.0"
__all__ = ["VolSurfError", "__version__"]
