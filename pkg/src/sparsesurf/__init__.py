"""Sparse-view neural surface reconstruction with on-surface point priors."""

__version__ = "0.1.0"
