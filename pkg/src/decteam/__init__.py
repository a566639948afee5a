"""Decentralized team strategies for linear stochastic systems with private noisy channels."""

__version__ = "0.1.0"
