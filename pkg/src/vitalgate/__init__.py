"""Sliding-window versus recurrent per-timestep classifiers for ICU vital signs."""

__version__ = "0.1.0"
