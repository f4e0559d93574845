"""qssep_lab package

Purpose: numerical laboratory for the quantum symmetric simple exclusion
process: G-matrix integrator, Fock-space oracle, classical SSEP, ensemble
statistics, Haar orbits and the variational large-deviation solver.
"""

# Re-export commonly used classes for convenience
from .config import ChainConfig, ExperimentConfig  # noqa: F401
from .errors import QssepError  # noqa: F401
from .grid import GridFunction  # noqa: F401
from .haar import SpectralMeasure  # noqa: F401
from .lab import ChainHandle, HaarHandle, OracleHandle, SsepHandle, VariationalHandle  # noqa: F401
