"""Standalone HBFS writer.

Deliberately independent of the retrieval engine's code: the container
format is the contract between the two packages.  Layout (little-endian):
magic "HBFS0001"; header {version u32 = 1, task u8 (0 = segmentation),
D u32, num_classes u32, num_epochs u32, num_images u32}; then per image
{image_id u64, H u32, W u32, features f32[H*W*D] row-major,
labels u16[256*H*W] with 0xFFFF = ignore}.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HBFS0001"
VERSION = 1
IGNORE_ID = 0xFFFF
PATCH = 16
_HEADER = struct.Struct("<IBIIII")
_IMAGE = struct.Struct("<QII")


def write_segmentation_set(epochs: list[list[tuple[int, np.ndarray, np.ndarray]]],
                           dim: int, num_classes: int) -> bytes:
    """Serialize per-epoch lists of (image_id, features, labels).

    features: (H*W, dim) float32; labels: (16H, 16W) uint16.
    """
    counts = {len(e) for e in epochs}
    if len(counts) != 1:
        raise ValueError(f"unequal image counts across epochs: {sorted(counts)}")
    out = bytearray(MAGIC)
    out += _HEADER.pack(VERSION, 0, dim, num_classes, len(epochs), len(epochs[0]))
    for epoch in epochs:
        for image_id, features, labels in epoch:
            rows, d = features.shape
            hp, wp = labels.shape
            if d != dim or hp % PATCH or wp % PATCH \
                    or rows != (hp // PATCH) * (wp // PATCH):
                raise ValueError(
                    f"inconsistent image record: features {features.shape}, "
                    f"labels {labels.shape}, dim {dim}")
            out += _IMAGE.pack(image_id, hp // PATCH, wp // PATCH)
            out += np.ascontiguousarray(features, dtype="<f4").tobytes()
            out += np.ascontiguousarray(labels, dtype="<u2").tobytes()
    return bytes(out)
