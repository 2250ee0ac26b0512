"""Mean-field stochastic control with delay driven by fractional Brownian motion."""

__version__ = "0.1.0"

from . import adjoint, control, fbm, fcalc, meanfield, sdde
from .errors import MfDelayError
from .grid import SampledFunction, TimeGrid

__all__ = [
    "MfDelayError",
    "SampledFunction",
    "TimeGrid",
    "adjoint",
    "control",
    "fbm",
    "fcalc",
    "meanfield",
    "sdde",
]
