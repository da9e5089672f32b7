"""Mask-guided attention supervision: training, batch-level Grad-CAM, evaluation, statistics."""

__version__ = "0.1.0"
