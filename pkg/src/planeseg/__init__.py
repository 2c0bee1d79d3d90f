"""Plane instance segmentation toolkit: NDT-RANSAC annotation, Fast Feature NMS,
prototype mask assembly and losses, residual feature augmentation, and metrics."""

__version__ = "0.1.0"
