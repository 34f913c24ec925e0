"""Desk-scale ultrasound effusion segmentation.

Synthetic phantom generation, annotation-cross cleanup, a from-scratch
U-Net with optional coordinate channels, the full training loop, and a
cross-validation statistics harness, all on plain numpy.
"""

__version__ = "0.1.0"
