"""Simulation and optimisation of stacked intelligent metasurface front-ends."""

__version__ = "0.1.0"
