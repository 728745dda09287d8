"""Reduced-order 4D-Var data assimilation for the 2D shallow water equations."""

__version__ = "0.1.0"
