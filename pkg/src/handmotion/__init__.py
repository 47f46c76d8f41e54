"""Two-hand motion modeling with cascaded sequence VAEs.

A short-span pose block and a long-span action block share one latent
bottleneck (the clip-wise mid-level feature), jointly covering input pose
refinement, action recognition, and diverse future motion prediction.
"""

__version__ = "0.1.0"

from .codec import (
    FRAME_DIM,
    N_JOINTS,
    EncodedMotion,
    HandTemplate,
    MotionSequence,
    default_template,
    encode_sequence,
    recover_trajectory,
)
from .nets import ModelConfig
from .taxonomy import Taxonomy, build_taxonomy, classify
from .training import AugmentParams, TrainConfig
from .transforms import RigidTransform, matrix_to_rot6d, rot6d_to_matrix, umeyama_align

__all__ = [
    "FRAME_DIM",
    "N_JOINTS",
    "AugmentParams",
    "EncodedMotion",
    "HandTemplate",
    "ModelConfig",
    "MotionSequence",
    "RigidTransform",
    "Taxonomy",
    "TrainConfig",
    "build_taxonomy",
    "classify",
    "default_template",
    "encode_sequence",
    "matrix_to_rot6d",
    "recover_trajectory",
    "rot6d_to_matrix",
    "umeyama_align",
]
