"""Latent-diffusion anomaly detection with dynamically conditioned reconstruction."""

__version__ = "0.1.0"
