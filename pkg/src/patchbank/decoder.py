"""Cross-attention decoding of feature grids against a memory bank.

Each patch feature queries the bank for its top-k neighbors; the cosine
scores, divided by a temperature, are softmaxed into attention weights that
blend the neighbors' patch labels.  Per-patch labels are then upsampled
bilinearly to pixel resolution and finalized per task.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import MemoryBank
from .errors import FileFormatError, ShapeMismatchError
from .features import (DEPTH, PATCH_SIZE, SEGMENTATION, FeatureGrid,
                       PatchLabel, PatchLabelGrid)
from .index import AnnIndex, search_batch


@dataclass(frozen=True)
class DecodeConfig:
    k: int = 30
    temperature: float = 0.02
    leaves_to_search: int | None = None
    reorder_n: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def attention_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(scores / temperature) along the last axis, max-subtracted."""
    s = np.asarray(scores, dtype=np.float64) / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _aggregate(scores: np.ndarray, values: np.ndarray, task: str,
               temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Blend neighbor labels with attention weights.

    scores: (..., k), values: (..., k, C).  Segmentation removes the ignore
    channel's mass and renormalizes over real classes; an all-ignore
    aggregate falls back to the uniform distribution and is flagged.
    """
    w = attention_weights(scores, temperature)
    agg = np.einsum("...k,...kc->...c", w, values.astype(np.float64))
    flags = np.zeros(agg.shape[:-1], dtype=bool)
    if task == SEGMENTATION:
        real = agg[..., :-1]
        total = real.sum(axis=-1)
        flags = total <= 0
        out = np.empty_like(agg)
        nc = real.shape[-1]
        safe = np.where(flags[..., None], 1.0, total[..., None])
        out[..., :-1] = np.where(flags[..., None], 1.0 / nc, real / safe)
        out[..., -1] = 0.0
        return out, flags
    return agg, flags


def decode_patch(query: np.ndarray,
                 neighbors: list[tuple[float, PatchLabel]],
                 temperature: float) -> PatchLabel:
    """Blend one patch's retrieved labels into a prediction."""
    if len(neighbors) == 0:
        raise ValueError("decode_patch needs at least one neighbor")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    task = neighbors[0][1].task
    scores = np.array([s for s, _ in neighbors], dtype=np.float64)
    values = np.stack([lab.data for _, lab in neighbors]).astype(np.float64)
    out, flags = _aggregate(scores[None, :], values[None, :, :], task, temperature)
    return PatchLabel(task, out[0], flagged=bool(flags[0]))


def decode_features(features: np.ndarray, index: AnnIndex, bank: MemoryBank,
                    cfg: DecodeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Decode a flat (N, D) query block; returns (N, C) labels and flags."""
    if features.shape[0] == 0:
        return (np.zeros((0, bank.values.shape[1])), np.zeros(0, dtype=bool))
    ids, scores = search_batch(index, features, cfg.k,
                               cfg.leaves_to_search, cfg.reorder_n)
    values = bank.values[ids]  # (N, k, C)
    return _aggregate(scores, values, bank.task, cfg.temperature)


def decode_image(grid: FeatureGrid, index: AnnIndex, bank: MemoryBank,
                 cfg: DecodeConfig) -> PatchLabelGrid:
    """Decode every patch of one image independently."""
    if grid.dim != bank.dim:
        raise ShapeMismatchError(
            f"feature dim {grid.dim} does not match bank dim {bank.dim}")
    flat, flags = decode_features(grid.features, index, bank, cfg)
    values = flat.reshape(grid.height, grid.width, -1)
    return PatchLabelGrid(bank.task, values,
                          flags=flags.reshape(grid.height, grid.width))


def upsample_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear interpolation with half-pixel sample centers.

    Source positions are clamped at the borders (edge padding), so constant
    inputs stay constant and convex channel combinations stay convex.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size {out_h}x{out_w} must be positive")
    v = np.asarray(values, dtype=np.float64)
    squeeze = v.ndim == 2
    if squeeze:
        v = v[:, :, None]
    h, w = v.shape[:2]

    def axis_coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0.0, n_in - 1.0)
        lo = np.floor(x).astype(np.int64)
        lo = np.minimum(lo, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, wy = axis_coords(out_h, h)
    x0, x1, wx = axis_coords(out_w, w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = v[y0][:, x0] * (1 - wx) + v[y0][:, x1] * wx
    bot = v[y1][:, x0] * (1 - wx) + v[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


@dataclass
class DensePrediction:
    """Per-pixel prediction for one image."""

    task: str
    image_id: int
    class_map: np.ndarray | None = None      # (H', W') uint16
    distribution: np.ndarray | None = None   # (H', W', C) float64
    depth: np.ndarray | None = None          # (H', W') float64

    def __post_init__(self):
        if self.task == SEGMENTATION:
            sums = self.distribution.sum(axis=-1)
            if not np.all(np.abs(sums - 1.0) <= 1e-5):
                raise ValueError("class distributions must sum to 1")
        elif not np.all(np.isfinite(self.depth)):
            raise ValueError("depth prediction contains non-finite values")


def finalize_prediction(dense: np.ndarray, task: str,
                        image_id: int = 0) -> DensePrediction:
    """Argmax segmentation maps (ties to the lowest class id) or pass depth."""
    if task == SEGMENTATION:
        return DensePrediction(task, image_id,
                               class_map=np.argmax(dense, axis=-1).astype(np.uint16),
                               distribution=dense)
    return DensePrediction(task, image_id, depth=dense)


def predict_image(grid: FeatureGrid, index: AnnIndex, bank: MemoryBank,
                  cfg: DecodeConfig) -> DensePrediction:
    """decode -> bilinear upsample -> finalize, at 16x patch resolution."""
    local = decode_image(grid, index, bank, cfg)
    out_h, out_w = grid.height * PATCH_SIZE, grid.width * PATCH_SIZE
    if bank.task == SEGMENTATION:
        dense = upsample_bilinear(local.values[:, :, :-1], out_h, out_w)
        return finalize_prediction(dense, SEGMENTATION, grid.image_id)
    dense = upsample_bilinear(local.values[:, :, 0], out_h, out_w)
    return finalize_prediction(dense, DEPTH, grid.image_id)


# --- HBPR container ----------------------------------------------------------

MAGIC = b"HBPR0001"
_HEADER = struct.Struct("<BIBI")
_IMAGE = struct.Struct("<QII")


def write_predictions(preds: list[DensePrediction], path: str | Path,
                      with_distributions: bool = False) -> None:
    if not preds:
        raise ValueError("nothing to write")
    task = preds[0].task
    num_classes = preds[0].distribution.shape[-1] if task == SEGMENTATION else 0
    out = bytearray(MAGIC)
    out += _HEADER.pack(0 if task == SEGMENTATION else 1, len(preds),
                        int(with_distributions and task == SEGMENTATION), num_classes)
    for p in preds:
        raster = p.class_map if task == SEGMENTATION else p.depth
        out += _IMAGE.pack(p.image_id, raster.shape[0], raster.shape[1])
        if task == SEGMENTATION:
            out += np.ascontiguousarray(p.class_map, dtype="<u2").tobytes()
            if with_distributions:
                out += np.ascontiguousarray(p.distribution, dtype="<f4").tobytes()
        else:
            out += np.ascontiguousarray(p.depth, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_predictions(path: str | Path) -> list[DensePrediction]:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise FileFormatError(f"bad magic {buf[:len(MAGIC)]!r}", 0)
    pos = len(MAGIC)
    task_code, n, has_dist, num_classes = _HEADER.unpack_from(buf, pos)
    pos += _HEADER.size
    task = SEGMENTATION if task_code == 0 else DEPTH
    preds = []
    for _ in range(n):
        if pos + _IMAGE.size > len(buf):
            raise FileFormatError("truncated prediction record", pos)
        image_id, h, w = _IMAGE.unpack_from(buf, pos)
        pos += _IMAGE.size

        def block(dtype, count):
            nonlocal pos
            nbytes = count * np.dtype(dtype).itemsize
            if pos + nbytes > len(buf):
                raise FileFormatError("truncated prediction payload", pos)
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy()
            pos += nbytes
            return arr

        if task == SEGMENTATION:
            cmap = block("<u2", h * w).reshape(h, w)
            dist = None
            if has_dist:
                dist = block("<f4", h * w * num_classes).reshape(h, w, num_classes)
            else:
                dist = np.eye(num_classes)[cmap]  # degenerate one-hot stand-in
            preds.append(DensePrediction(task, image_id, class_map=cmap,
                                         distribution=dist.astype(np.float64)))
        else:
            dep = block("<f4", h * w).reshape(h, w).astype(np.float64)
            preds.append(DensePrediction(task, image_id, depth=dep))
    return preds
