"""fdivlab: a numerical laboratory for f-divergence dissipation, filter
stability, and information thermodynamics in Markov models."""

__version__ = "0.1.0"

from . import errors, models, measures, rng, simulate  # noqa: F401
from . import kolmogorov, filtering, stability, thermo  # noqa: F401

# reporting and cli import matplotlib/yaml; load them explicitly when needed
