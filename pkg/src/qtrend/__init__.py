"""Bayesian quantile trend filtering with shrinkage priors."""

__version__ = "0.1.0"
