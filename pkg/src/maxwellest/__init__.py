"""Time-harmonic Maxwell solver with equilibrated a posteriori estimation."""

__version__ = "0.1.0"
