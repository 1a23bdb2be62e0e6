"""Homography-based input alignment and self-homography learning for anomaly detection."""
from .geometry import (
    CornerDisplacement,
    HomographyMatrix,
    ImageFrame,
    apply_homography,
    compose,
    displacement_to_homography,
    dlt_solve,
    homography_to_displacement,
    invert,
    rotation_to_displacement,
    warp_image,
)

__version__ = "0.1.0"
