"""Multi-frame deturbulence with quasi-conformal regularized deformation fields."""

__version__ = "0.1.0"
