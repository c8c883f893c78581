"""Conformal prediction sets for classification under covariate shift."""

__version__ = "0.1.0"
