"""Contextual hierarchical models for image segmentation and boundary detection."""

from .chm import ChmModel, chm_infer, chm_trace, chm_train, train_multiclass
from .core import ChmConfig, ChmError, FeatureConfig, ImagePlane, LabelMap, ProbabilityMap, new_image
from .io import load_image, load_labels, load_model, save_model

__all__ = [
    "ChmConfig",
    "ChmError",
    "ChmModel",
    "FeatureConfig",
    "ImagePlane",
    "LabelMap",
    "ProbabilityMap",
    "chm_infer",
    "chm_trace",
    "chm_train",
    "load_image",
    "load_labels",
    "load_model",
    "new_image",
    "save_model",
    "train_multiclass",
]
