"""Adaptive linear model reduction for deformable simulation.

Submodules are imported on demand so the CLI can configure BLAS threading
before numpy loads.
"""

__version__ = "0.1.0"
