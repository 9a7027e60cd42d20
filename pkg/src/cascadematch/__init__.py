"""Cascaded transformer image matching at desk scale.

Coarse dual-softmax matching on a 1/8 feature grid, candidate-restricted
cascade attention at 1/4 and 1/2, sub-pixel soft-argmax refinement, and
training-free keypoint detection on the resulting confidence maps.
"""

__version__ = "0.1.0"
