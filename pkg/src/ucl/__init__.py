"""Continual representation learning: unsupervised (SimSiam, BarlowTwins) and supervised task streams."""

__version__ = "0.1.0"
