"""Functional Ito calculus on path and path-measure spaces, mean-field BSDE
solvers and verification tools for path-dependent master equations."""
__version__ = "0.1.0"
