"""Simulation toolkit for large tweezer-stabilised linear ion crystals."""

from ioncrystal.errors import ConfigError, ConvergenceError, InstabilityError, NumericError
from ioncrystal.physmodel import (
    TrapConfig,
    TweezerLayout,
    UnitSystem,
    derive_units,
    doppler_temperature,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "InstabilityError",
    "NumericError",
    "TrapConfig",
    "TweezerLayout",
    "UnitSystem",
    "derive_units",
    "doppler_temperature",
]
