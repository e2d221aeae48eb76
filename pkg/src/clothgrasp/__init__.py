"""Desk-scale RGB-D fusion segmentation, adversarial augmentation, and cloth
grasp-point selection."""

__version__ = "0.1.0"
