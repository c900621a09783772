"""Patch encoders: 16x16 RGB blocks to feature vectors.

The built-in encoder is a linear projection of flattened patches.  Its
weights come either from a seeded Gaussian draw (identifiers like
``linear16-d64``) or from an .npz checkpoint with ``weight`` (768, D) and
optional ``bias`` arrays, which is how externally pretrained projections
plug in.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .hbfswriter import PATCH

_LINEAR_RE = re.compile(r"^linear16-d(\d+)(?:-s(\d+))?$")


class PatchEncoder:
    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        if weight.ndim != 2 or weight.shape[0] != PATCH * PATCH * 3:
            raise ValueError(f"weight must be ({PATCH * PATCH * 3}, D), "
                             f"got {weight.shape}")
        self.weight = weight.astype(np.float64)
        self.bias = np.zeros(weight.shape[1]) if bias is None else bias.astype(np.float64)

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(16H, 16W, 3) uint8 image to (H*W, dim) float32, raster order."""
        hp, wp = image.shape[:2]
        if hp % PATCH or wp % PATCH:
            raise ValueError(f"image size {image.shape[:2]} not divisible by {PATCH}")
        h, w = hp // PATCH, wp // PATCH
        x = image.astype(np.float64) / 255.0
        patches = x.reshape(h, PATCH, w, PATCH, 3).transpose(0, 2, 1, 3, 4)
        flat = patches.reshape(h * w, PATCH * PATCH * 3)
        feats = flat @ self.weight + self.bias
        return feats.astype(np.float32)


def load_encoder(identifier: str) -> PatchEncoder:
    """Resolve an encoder identifier or an .npz checkpoint path."""
    match = _LINEAR_RE.match(identifier)
    if match:
        dim = int(match.group(1))
        seed = int(match.group(2) or 0)
        rng = np.random.default_rng([seed, 0xE9C0])
        n_in = PATCH * PATCH * 3
        return PatchEncoder(rng.standard_normal((n_in, dim)) / np.sqrt(n_in))
    path = Path(identifier)
    if path.suffix == ".npz" and path.exists():
        blob = np.load(path)
        return PatchEncoder(blob["weight"],
                            blob["bias"] if "bias" in blob else None)
    raise ValueError(
        f"unknown encoder {identifier!r}: expected linear16-d<D>[-s<seed>] "
        f"or a path to an .npz with 'weight'")
