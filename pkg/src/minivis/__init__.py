"""Desk-scale one-stage video instance segmentation.

Detection, sub-region mask blending, and center-movement tracking trained
jointly on synthetic videos of moving shapes, with a track-level AP evaluator.
"""

__version__ = "0.1.0"
