"""Thin adapter from annotated image folders to HBFS feature sets.

Runs a patch encoder over each image, applies evaluation-time augmentations
per epoch (epoch one stays unaugmented), and serializes patch features plus
pixel labels in the HBFS container the retrieval engine consumes.  The
engine is only ever touched through that file format.
"""

from .augment import augment_pair
from .config import AugmentParams, ExportConfig
from .encoder import PatchEncoder, load_encoder
from .export import export_features

__all__ = ["AugmentParams", "ExportConfig", "PatchEncoder", "augment_pair",
           "export_features", "load_encoder"]
