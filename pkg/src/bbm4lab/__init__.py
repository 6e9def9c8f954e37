"""Numerics and simulations for hitting probabilities of critical branching Brownian motion."""

__version__ = "0.1.0"
