"""Monte Carlo lab for martingale-measure diagnostics.

Two built-in markets (a jump-intensity market with an absorbing price level
and a lognormal control), density/change-of-measure machinery, convex-duality
checks, and nested-Monte-Carlo estimation of conditional functionals over
stopping-time families.
"""

from .params import (
    ABSORBING_LEVEL,
    ControlParams,
    CounterexampleParams,
    DensityVariant,
    intensity,
    p_prime,
    select_counterexample_params,
)
from .stats import McEstimate

__version__ = "0.1.0"

__all__ = [
    "ABSORBING_LEVEL",
    "ControlParams",
    "CounterexampleParams",
    "DensityVariant",
    "McEstimate",
    "intensity",
    "p_prime",
    "select_counterexample_params",
    "__version__",
]
