"""Simulator and Monte Carlo measurement lab for a dilute gas of fixed
hard-sphere scatterers in 3D, in the rate-1 mean-free-path normalisation."""

__version__ = "0.1.0"
