"""Finite-element solvers for coupled flow and mechanics in porous media.

Minimization-based time stepping for Biot-type models with iterative
splitting schemes (undrained, fixed-stress and their visco-elastic,
thermal and nonlinear variants), line-search relaxation, and
contraction-rate certificates.
"""

__version__ = "0.1.0"

from . import analysis, bench, energy, fem, linalg, mesh, models, solvers

__all__ = [
    "analysis",
    "bench",
    "energy",
    "fem",
    "linalg",
    "mesh",
    "models",
    "solvers",
]
