"""Controlled-effect hierarchical RL: environment, learning stack and experiment CLI."""

__version__ = "0.1.0"
