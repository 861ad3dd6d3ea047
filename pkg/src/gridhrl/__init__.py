"""Decoupled hierarchical RL with state abstraction for discrete grid worlds."""

__version__ = "0.1.0"
