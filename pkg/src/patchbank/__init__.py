"""In-context dense scene understanding by patch retrieval.

Build a memory bank of patch features and labels from an annotated prompt,
index it for cosine top-k search, and decode new feature grids into
segmentation or depth predictions by temperature-scaled cross-attention.
A desk-scale, gradient-checked implementation of the associated
pretraining mechanisms (contextualization, attention pooling, contrastive
and retrieval-based supervised losses) is included.
"""

from .bank import MemoryBank, SamplerConfig, build_bank, read_bank, write_bank
from .decoder import (DecodeConfig, DensePrediction, decode_image, decode_patch,
                      finalize_prediction, predict_image, upsample_bilinear)
from .errors import FileFormatError, ShapeMismatchError, UnusableConfigError
from .features import (DEPTH, IGNORE_ID, PATCH_SIZE, SEGMENTATION, FeatureGrid,
                       FeatureSet, PatchLabel, PatchLabelGrid, PixelLabels,
                       patchify_labels)
from .hbfs import read_feature_set, write_feature_set
from .index import (AnnIndex, IndexParams, build_exact, build_quantized,
                    recall_at_k, scaled_params, search, search_batch)
from .metrics import EvalReport, mean_iou, rmse_depth
from .synthetic import generate_synthetic_scene_set, synthetic_prototypes

__all__ = [
    "AnnIndex", "DecodeConfig", "DensePrediction", "DEPTH", "EvalReport",
    "FeatureGrid", "FeatureSet", "FileFormatError", "IGNORE_ID", "IndexParams",
    "MemoryBank", "PATCH_SIZE", "PatchLabel", "PatchLabelGrid", "PixelLabels",
    "SEGMENTATION", "SamplerConfig", "ShapeMismatchError", "UnusableConfigError",
    "build_bank", "build_exact", "build_quantized", "decode_image",
    "decode_patch", "finalize_prediction", "generate_synthetic_scene_set",
    "mean_iou", "patchify_labels", "predict_image", "read_bank",
    "read_feature_set", "recall_at_k", "rmse_depth", "scaled_params", "search",
    "search_batch", "synthetic_prototypes", "upsample_bilinear", "write_bank",
    "write_feature_set",
]

__version__ = "0.1.0"
