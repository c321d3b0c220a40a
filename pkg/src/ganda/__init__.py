"""Predict nanoparticle distribution channels from nuclei and vessel stains with a conditional GAN."""

__version__ = "0.1.0"
