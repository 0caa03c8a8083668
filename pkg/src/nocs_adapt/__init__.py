"""Unsupervised adaptation of a category-level NOCS pose estimator.

Modules: ``geom`` (similarity poses, Umeyama, RANSAC), ``nocs`` (binned
coordinates and losses), ``filtering`` (bidirectional and baseline
pseudo-label filters), ``synth`` (synthetic scenes), ``model`` and
``adapt`` (toy predictor, pretraining and self-training), ``metrics``
(IoU and pose AP) and ``cli``.
"""
from .errors import (
    DegenerateInput,
    EmptySelection,
    InvalidSpec,
    NoConsensus,
    NonFiniteLoss,
    ShapeMismatch,
    UnknownClass,
)
from .geom import RansacConfig, SimilarityPose, SymmetrySpec, align_depth, geodesic_rotation_error, ransac_pose, umeyama

__version__ = "0.1.0"

__all__ = [
    "DegenerateInput",
    "EmptySelection",
    "InvalidSpec",
    "NoConsensus",
    "NonFiniteLoss",
    "ShapeMismatch",
    "UnknownClass",
    "RansacConfig",
    "SimilarityPose",
    "SymmetrySpec",
    "align_depth",
    "geodesic_rotation_error",
    "ransac_pose",
    "umeyama",
]
