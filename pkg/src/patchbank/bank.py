"""Memory bank construction: per-image patch subsampling and key storage.

The bank is a flat table of L2-normalized patch features (keys) and patch
labels (values).  When the configured capacity cannot hold every patch, each
image contributes the same number of patches, chosen by a saliency heuristic:
segmentation favors patches whose classes appear in few patches of the image,
depth favors patches with any valid pixels, in random order.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ShapeMismatchError, UnusableConfigError
from .features import DEPTH, SEGMENTATION, FeatureSet, PatchLabelGrid, patchify_labels

logger = logging.getLogger(__name__)

# The empty-patch penalty dominates any class score as long as class scores
# stay below it; build_bank enforces that headroom.
EMPTY_PATCH_PENALTY = 1e6

PROVENANCE_DTYPE = np.dtype([("image_id", "<u8"), ("epoch", "<u4"), ("patch", "<u4")])


@dataclass(frozen=True)
class SamplerConfig:
    capacity: int
    aug_epochs: int = 1
    downsample: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise UnusableConfigError(f"capacity must be >= 1, got {self.capacity}")
        if self.aug_epochs < 1:
            raise UnusableConfigError(f"aug_epochs must be >= 1, got {self.aug_epochs}")


@dataclass
class MemoryBank:
    """Flat key/value table queried at decode time."""

    task: str
    num_classes: int
    keys: np.ndarray        # (M, D) float32, unit rows
    values: np.ndarray      # (M, num_classes+1) or (M, 2) float32
    provenance: np.ndarray  # (M,) PROVENANCE_DTYPE
    truncated: int = 0      # patches dropped once capacity filled (store-all mode)

    def __post_init__(self):
        if self.keys.ndim != 2 or len(self.values) != len(self.keys) \
                or len(self.provenance) != len(self.keys):
            raise ShapeMismatchError("keys, values, provenance must align")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


def segmentation_patch_scores(grid: PatchLabelGrid,
                              rng: np.random.Generator) -> np.ndarray:
    """Per-patch sampling scores; lower is more likely to be kept.

    A patch "contains" a class when its histogram mass for it is > 0.  Rare
    classes make their patches cheap; patches with no class at all are pushed
    behind everything by a large constant.  One uniform draw per patch (in
    raster order) breaks up spatial runs of equal scores.
    """
    if grid.task != SEGMENTATION:
        raise ValueError("segmentation scores need a segmentation grid")
    hist = grid.flat_values()[:, :-1]
    contains = hist > 0                     # (N, C)
    kappa = contains.sum(axis=0)            # patches containing each class
    class_score = contains @ kappa.astype(np.float64)
    empty = ~contains.any(axis=1)
    x = rng.random(len(class_score))
    return class_score * x + EMPTY_PATCH_PENALTY * empty


def select_lowest(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n lowest scores, ties broken by lower index."""
    if not 0 <= n <= len(scores):
        raise ValueError(f"cannot select {n} of {len(scores)} entries")
    return np.argsort(scores, kind="stable")[:n]


def select_patches(grid: PatchLabelGrid, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Pick ``n`` patch indices from one image, deterministically per rng.

    Segmentation keeps the n lowest sampling scores, ties broken by lower
    patch index.  Depth shuffles all patches, stable-partitions those with
    any valid pixels ahead of fully-invalid ones, and truncates.
    """
    total = grid.height * grid.width
    if not 0 <= n <= total:
        raise ValueError(f"cannot select {n} of {total} patches")
    if grid.task == SEGMENTATION:
        return select_lowest(segmentation_patch_scores(grid, rng), n)
    perm = rng.permutation(total)
    invalid = grid.flat_values()[perm, 1] <= 0
    return perm[np.argsort(invalid, kind="stable")][:n]


def features_per_image(capacity: int, num_images: int, aug_epochs: int) -> int:
    """Equal per-(image, epoch) budget: floor(|M| / (images * epochs))."""
    return capacity // (num_images * aug_epochs)


def normalize_keys(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot L2-normalize zero feature vectors")
    return (features / norms).astype(np.float32)


def build_bank(fset: FeatureSet, cfg: SamplerConfig) -> MemoryBank:
    """Assemble the memory bank from a feature set.

    With downsampling, every (image, epoch) pair contributes exactly
    ``features_per_image`` patches via ``select_patches`` using an rng stream
    keyed by (seed, image_id, epoch), so the result does not depend on build
    order.  Without downsampling, all patches are stored in (epoch, image,
    patch) order until capacity, counting what was dropped.
    """
    if cfg.aug_epochs > len(fset.epochs):
        raise UnusableConfigError(
            f"requested {cfg.aug_epochs} augmentation epochs, set has {len(fset.epochs)}")
    num_images = fset.num_images
    if num_images == 0:
        empty_ch = fset.num_classes + 1 if fset.task == SEGMENTATION else 2
        return MemoryBank(fset.task, fset.num_classes,
                          np.zeros((0, 1), np.float32),
                          np.zeros((0, empty_ch), np.float32),
                          np.zeros(0, PROVENANCE_DTYPE))

    n_per = None
    if cfg.downsample:
        n_per = features_per_image(cfg.capacity, num_images, cfg.aug_epochs)
        if n_per == 0:
            raise UnusableConfigError(
                f"n_per_image = 0: capacity {cfg.capacity} cannot give "
                f"{num_images} images x {cfg.aug_epochs} epochs one patch each")

    key_rows, value_rows, prov_rows = [], [], []
    truncated = 0
    for epoch_idx in range(cfg.aug_epochs):
        for grid, labels in fset.epochs[epoch_idx]:
            plabels = patchify_labels(labels, grid.height, grid.width, fset.num_classes)
            if cfg.downsample:
                if fset.task == SEGMENTATION:
                    # Headroom check keeping the empty-patch penalty dominant.
                    max_score = grid.height * grid.width * fset.num_classes
                    if max_score >= EMPTY_PATCH_PENALTY:
                        raise UnusableConfigError(
                            f"class scores may reach {max_score}, defeating the "
                            f"empty-patch penalty {EMPTY_PATCH_PENALTY:g}")
                rng = np.random.default_rng([cfg.seed, grid.image_id, epoch_idx])
                take = min(n_per, grid.height * grid.width)
                picked = select_patches(plabels, take, rng)
            else:
                room = cfg.capacity - sum(len(k) for k in key_rows)
                all_idx = np.arange(grid.height * grid.width)
                picked = all_idx[:max(room, 0)]
                truncated += len(all_idx) - len(picked)
            if len(picked) == 0:
                continue
            key_rows.append(normalize_keys(grid.features[picked]))
            value_rows.append(plabels.flat_values()[picked].astype(np.float32))
            prov = np.zeros(len(picked), PROVENANCE_DTYPE)
            prov["image_id"] = grid.image_id
            prov["epoch"] = epoch_idx
            prov["patch"] = picked
            prov_rows.append(prov)

    if truncated:
        logger.warning("memory bank capacity %d reached, dropped %d patches",
                       cfg.capacity, truncated)
    keys = np.concatenate(key_rows) if key_rows else np.zeros((0, fset.dim), np.float32)
    values = np.concatenate(value_rows) if value_rows else np.zeros(
        (0, fset.num_classes + 1 if fset.task == SEGMENTATION else 2), np.float32)
    prov = np.concatenate(prov_rows) if prov_rows else np.zeros(0, PROVENANCE_DTYPE)
    return MemoryBank(fset.task, fset.num_classes, keys, values, prov, truncated)


# --- HBMB container ---------------------------------------------------------

MAGIC = b"HBMB0001"
_HEADER = struct.Struct("<IBIQ")
_TASK_CODE = {SEGMENTATION: 0, DEPTH: 1}
_TASK_NAME = {v: k for k, v in _TASK_CODE.items()}


def bank_to_bytes(bank: MemoryBank) -> bytes:
    out = bytearray()
    out += MAGIC
    out += _HEADER.pack(bank.dim, _TASK_CODE[bank.task], bank.num_classes, len(bank))
    out += np.ascontiguousarray(bank.keys, dtype="<f4").tobytes()
    out += np.ascontiguousarray(bank.values, dtype="<f4").tobytes()
    out += np.ascontiguousarray(bank.provenance).tobytes()
    return bytes(out)


def write_bank(bank: MemoryBank, path: str | Path, index_section: bytes = b"") -> None:
    """Write an HBMB file, optionally with a serialized index appended."""
    Path(path).write_bytes(bank_to_bytes(bank) + index_section)


def read_bank(path: str | Path) -> tuple[MemoryBank, bytes]:
    """Parse an HBMB file; returns the bank and any trailing index section."""
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise FileFormatError(f"bad magic {buf[:len(MAGIC)]!r}, expected {MAGIC!r}", 0)
    pos = len(MAGIC)
    if len(buf) < pos + _HEADER.size:
        raise FileFormatError("truncated bank header", pos)
    dim, task_code, num_classes, m = _HEADER.unpack_from(buf, pos)
    pos += _HEADER.size
    if task_code not in _TASK_NAME:
        raise FileFormatError(f"unknown task code {task_code}", len(MAGIC) + 4)
    task = _TASK_NAME[task_code]
    channels = num_classes + 1 if task == SEGMENTATION else 2

    def block(dtype, count, what):
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(buf):
            raise FileFormatError(f"truncated {what} block", pos)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy()
        pos += nbytes
        return arr

    keys = block("<f4", m * dim, "keys").reshape(m, dim)
    values = block("<f4", m * channels, "values").reshape(m, channels)
    prov = block(PROVENANCE_DTYPE, m, "provenance")
    return MemoryBank(task, num_classes, keys, values, prov), buf[pos:]
