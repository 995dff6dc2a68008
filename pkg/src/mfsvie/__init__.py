"""Particle solvers for mean-field forward and backward stochastic Volterra integral equations.

The package root stays import-light (no numpy) so that the command line can
set BLAS thread counts before numpy loads; import from the submodules.
"""

__version__ = "0.1.0"
