"""Gradient-edited adversarial attacks and perturbation-generator GANs at desk scale."""

__version__ = "0.1.0"
