"""Dual-adapter classification of paired time series and text on a frozen transformer, in plain numpy."""

__version__ = "0.1.0"
