"""Pulse-thermography inspection toolkit: PCA/TSR compression, spatiotemporal
augmentation and an attention-fusion segmentation / depth network."""

from thermofuse.sequence import GroundTruth, ThermalSequence

__version__ = "0.1.0"

__all__ = ["GroundTruth", "ThermalSequence", "__version__"]
