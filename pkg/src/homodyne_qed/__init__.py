"""Conditional dynamics of a driven atom in a leaky cavity under homodyne detection."""

from .hilbert import SystemParams

__all__ = ["SystemParams"]
__version__ = "0.1.0"
