"""LQ-VAE adversarial filter: model, attacks, analysis, and evaluation."""

__version__ = "0.1.0"
