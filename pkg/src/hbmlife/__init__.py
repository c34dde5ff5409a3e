"""Early-life battery lifetime prediction with a two-level hierarchical Bayesian model."""

__version__ = "0.1.0"
