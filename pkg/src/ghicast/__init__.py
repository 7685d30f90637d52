"""Probabilistic forecasting workbench for hourly global horizontal irradiance."""

from .errors import ConfigError, DataError, GhicastError, NumericalError, ProtocolError

__all__ = ["ConfigError", "DataError", "GhicastError", "NumericalError", "ProtocolError"]
