"""Ferroelectric phase-field solver.

Gradient-flow dynamics of a simple anisotropic Ginzburg-Landau-Devonshire
energy, discretized with an energy-stable semi-implicit (convex-split) time
scheme and a hybridizable discontinuous Galerkin (HDG) method on axis-aligned
quadrilateral meshes.
"""

__version__ = "0.1.0"
