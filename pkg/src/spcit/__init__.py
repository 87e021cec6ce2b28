"""Distribution-free sequential prediction intervals for time series."""

__version__ = "0.1.0"
