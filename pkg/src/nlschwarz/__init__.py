"""Nonlinear Schwarz domain-decomposition solvers with GDSW-type coarse spaces."""

__version__ = "0.1.0"
