"""Spectral neural-operator surrogate for radial two-phase injection,
with a synthetic data pipeline, training loop, and evaluation suite."""

__version__ = "0.1.0"
