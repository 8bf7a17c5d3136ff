"""Cascaded-regression landmark alignment with affine-invariant expert mixtures."""

from .cascade import Expert, MixModel, gating_weights, init_from_bbox, mix_align, ti_sdm_stage
from .clustering import ShapeConstraints, build_constraints, cluster_shapes, cluster_shapes_euclidean
from .evaluation import cdf_points, nauc, normalized_error
from .features import DescriptorParams, extend_constrained, extract_descriptor, extract_features
from .geometry import AffineTransform, alignment_error, canonical_normalize, fit_affine, invert, warp_image
from .regression import RegressionStage, fit_ridge, select_gamma, trim_outliers
from .training import TrainConfig, sample_perturbation, train, variant_config

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "DescriptorParams",
    "Expert",
    "MixModel",
    "RegressionStage",
    "ShapeConstraints",
    "TrainConfig",
    "alignment_error",
    "build_constraints",
    "canonical_normalize",
    "cdf_points",
    "cluster_shapes",
    "cluster_shapes_euclidean",
    "extend_constrained",
    "extract_descriptor",
    "extract_features",
    "fit_affine",
    "fit_ridge",
    "gating_weights",
    "init_from_bbox",
    "invert",
    "mix_align",
    "nauc",
    "normalized_error",
    "sample_perturbation",
    "select_gamma",
    "ti_sdm_stage",
    "train",
    "trim_outliers",
    "variant_config",
    "warp_image",
]
