"""Simulation and exact-verification toolkit for latent-intention languages."""

__version__ = "0.1.0"
