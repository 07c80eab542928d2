"""Desk-scale federated-learning simulator and adapter gradient-inversion lab."""

__version__ = "0.1.0"
