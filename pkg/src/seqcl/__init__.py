"""Continual-learning engine and benchmark harness for clinical-style time series."""

__version__ = "0.1.0"
