"""Time- and velocity-aware recurrent cells for irregular clinical time series."""

__version__ = "0.1.0"
