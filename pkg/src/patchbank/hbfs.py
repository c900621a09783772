"""HBFS feature-set container.

Little-endian layout:

    magic   "HBFS0001"
    header  version u32, task u8 (0 seg / 1 depth), D u32, num_classes u32
            (0 for depth), num_epochs u32, num_images u32
    per image (epoch-major, num_epochs x num_images records):
            image_id u64, H u32, W u32
            features f32[H*W*D] row-major
            segmentation: labels u16[256*H*W] with 0xFFFF = IGNORE
            depth:        values f32[256*H*W], then a validity bitset of
                          ceil(256*H*W / 8) bytes (little bit order)

Reads are strict: bad magic, version mismatch, or truncation raise
FileFormatError naming the byte offset, and never return a partial set.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .features import (DEPTH, PATCH_SIZE, SEGMENTATION, FeatureGrid,
                       FeatureSet, PixelLabels)

MAGIC = b"HBFS0001"
VERSION = 1
_HEADER = struct.Struct("<IBIIII")
_IMAGE = struct.Struct("<QII")
_TASK_CODE = {SEGMENTATION: 0, DEPTH: 1}
_TASK_NAME = {0: SEGMENTATION, 1: DEPTH}


def write_feature_set(fset: FeatureSet, path: str | Path) -> None:
    """Serialize a feature set; read_feature_set(write(...)) is bit-exact."""
    Path(path).write_bytes(feature_set_to_bytes(fset))


def feature_set_to_bytes(fset: FeatureSet) -> bytes:
    counts = {len(epoch) for epoch in fset.epochs}
    if len(counts) > 1:
        raise ValueError(f"epochs hold unequal image counts {sorted(counts)}")
    num_images = len(fset.epochs[0])
    dim = fset.dim if num_images else 0

    out = bytearray()
    out += MAGIC
    out += _HEADER.pack(VERSION, _TASK_CODE[fset.task], dim,
                        fset.num_classes if fset.task == SEGMENTATION else 0,
                        len(fset.epochs), num_images)
    for epoch in fset.epochs:
        for grid, labels in epoch:
            out += _IMAGE.pack(grid.image_id, grid.height, grid.width)
            out += np.ascontiguousarray(grid.features, dtype="<f4").tobytes()
            if fset.task == SEGMENTATION:
                out += np.ascontiguousarray(labels.classes, dtype="<u2").tobytes()
            else:
                out += np.ascontiguousarray(labels.depth, dtype="<f4").tobytes()
                out += np.packbits(labels.valid.reshape(-1),
                                   bitorder="little").tobytes()
    return bytes(out)


class _Reader:
    """Cursor over a byte buffer that reports offsets on truncation."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FileFormatError(
                f"truncated payload: needed {n} bytes for {what}, "
                f"{len(self.buf) - self.pos} remain", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype, count=count)


def read_feature_set(path: str | Path) -> FeatureSet:
    return parse_feature_set(Path(path).read_bytes())


def parse_feature_set(buf: bytes) -> FeatureSet:
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FileFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, task_code, dim, num_classes, num_epochs, num_images = \
        _HEADER.unpack(r.take(_HEADER.size, "header"))
    if version != VERSION:
        raise FileFormatError(f"version mismatch: file has {version}, "
                              f"reader supports {VERSION}", len(MAGIC))
    if task_code not in _TASK_NAME:
        raise FileFormatError(f"unknown task code {task_code}", len(MAGIC) + 4)
    task = _TASK_NAME[task_code]

    epochs = []
    for _ in range(num_epochs):
        images = []
        for _ in range(num_images):
            image_id, h, w = _IMAGE.unpack(r.take(_IMAGE.size, "image header"))
            feats = r.array("<f4", h * w * dim, "features").reshape(h * w, dim)
            hp, wp = h * PATCH_SIZE, w * PATCH_SIZE
            if task == SEGMENTATION:
                cls = r.array("<u2", hp * wp, "class labels").reshape(hp, wp)
                labels = PixelLabels(SEGMENTATION, classes=cls.copy())
            else:
                dep = r.array("<f4", hp * wp, "depth labels").reshape(hp, wp)
                nbits = hp * wp
                packed = r.array("u1", (nbits + 7) // 8, "validity bitset")
                valid = np.unpackbits(packed, bitorder="little")[:nbits]
                labels = PixelLabels(DEPTH, depth=dep.copy(),
                                     valid=valid.astype(bool).reshape(hp, wp))
            images.append((FeatureGrid(image_id, h, w, feats.copy()), labels))
        epochs.append(images)
    if r.pos != len(buf):
        raise FileFormatError(
            f"{len(buf) - r.pos} trailing bytes after last image", r.pos)
    return FeatureSet(task, num_classes, epochs)
