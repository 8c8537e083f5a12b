"""Adversarial attacks on segmentation models and a denoising-autoencoder purifier."""

__version__ = "0.1.0"
