"""Repulse - repulsive particle ensembles with uncertainty decomposition."""

__version__ = "0.1.0"
