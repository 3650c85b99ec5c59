"""Active learning of coarse-grained free energy surfaces with conditional normalizing flows."""

__version__ = "0.1.0"
