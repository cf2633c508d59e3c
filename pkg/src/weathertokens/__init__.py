"""Day-ahead renewable power forecasting from sequences of weather maps."""

__version__ = "0.1.0"
