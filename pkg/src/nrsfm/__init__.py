"""Monocular 3D reconstruction of deformable objects learned from 2D keypoints.

A factorization network maps one view of K keypoints to shape coefficients
and a camera rotation; a canonicalization network regularizes it so that each
structure has a single canonical orientation. Everything (autodiff, networks,
training, classical baselines) is implemented on top of numpy.
"""

from .geometry import project, rot_expm, sample_rotation
from .networks import TrunkConfig, init_weights
from .shapemodel import KeypointView, PoseEstimate, ShapeBasis, reconstruct
from .synthgen import SynthConfig, generate, generate_rigid
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "project", "rot_expm", "sample_rotation", "TrunkConfig", "init_weights", "KeypointView",
    "PoseEstimate", "ShapeBasis", "reconstruct", "SynthConfig", "generate", "generate_rigid",
    "TrainConfig", "fit",
]
