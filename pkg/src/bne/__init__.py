"""Bayesian nonparametric ensembles over fixed base-model predictions."""

__version__ = "0.1.0"
