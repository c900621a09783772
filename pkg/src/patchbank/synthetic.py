"""Synthetic scene sets used as the test substrate.

Scenes are horizontal stripes of patch rows, each stripe carrying one class.
Patch features are unit-normalized class prototypes plus Gaussian noise, so
nearest-prototype structure is known exactly and retrieval quality can be
checked against ground truth.  Straight stripe boundaries also guarantee that
bilinear upsampling of correct per-patch one-hot labels never flips the
per-pixel argmax, which keeps self-prompt evaluation exact.

Everything is keyed off integer seeds; the same arguments always reproduce
the same set bit for bit.
"""

from __future__ import annotations

import numpy as np

from .features import (DEPTH, PATCH_SIZE, SEGMENTATION, FeatureGrid,
                       FeatureSet, PixelLabels)

# Depth fields generated below stay inside this range.
DEPTH_MIN = 0.75
DEPTH_MAX = 2.25

_LAYOUT_SALT = 0x5CE11E
_NOISE_SALT = 0x4015E
_FACTOR_SALT = 0xFAC70


def synthetic_prototypes(dim: int, num_classes: int, seed: int) -> np.ndarray:
    """Orthonormal class prototypes, (num_classes, dim) float64."""
    if num_classes > dim:
        raise ValueError(f"need num_classes <= dim, got {num_classes} > {dim}")
    rng = np.random.default_rng([seed, 0xB0BA])
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q[:num_classes].copy()


def synthetic_factors(dim: int, rank: int, seed: int) -> np.ndarray:
    """Shared unit noise factors for the low-rank feature variant."""
    rng = np.random.default_rng([seed, _FACTOR_SALT])
    b = rng.standard_normal((rank, dim))
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _stripe_rows(height: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Class id per patch row, in contiguous runs of 1-4 rows."""
    rows = np.empty(height, dtype=np.int64)
    r = 0
    prev = -1
    while r < height:
        run = int(rng.integers(1, 5))
        cls = int(rng.integers(0, num_classes))
        if cls == prev and num_classes > 1:
            cls = (cls + 1) % num_classes
        rows[r:r + run] = cls
        prev = cls
        r += run
    return rows


def _depth_rows(height: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-patch-row depth profile inside [DEPTH_MIN, DEPTH_MAX]."""
    phase = rng.uniform(0, 2 * np.pi)
    cycles = rng.uniform(0.5, 1.5)
    t = np.arange(height) / max(height, 1)
    return 1.5 + 0.75 * np.sin(2 * np.pi * cycles * t + phase)


def _noisy_unit(base: np.ndarray, sigma: float, rng: np.random.Generator,
                factors: np.ndarray | None = None,
                factor_scale: float = 0.3) -> np.ndarray:
    """Unit-normalized base plus noise.

    With ``factors`` the noise is mostly a random combination of a few shared
    directions plus a small isotropic residual of scale sigma, mimicking
    encoder features that concentrate near a low-dimensional manifold (which
    is what block quantization relies on).  Without factors the noise is
    plain isotropic Gaussian.
    """
    if factors is not None:
        w = rng.standard_normal((len(base), len(factors))) * factor_scale
        v = base + w @ factors + sigma * rng.standard_normal(base.shape)
    elif sigma == 0:
        return base
    else:
        v = base + sigma * rng.standard_normal(base.shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate_synthetic_scene_set(num_images: int, height: int, width: int,
                                 dim: int, num_classes: int,
                                 noise_sigma: float, seed: int,
                                 task: str = SEGMENTATION,
                                 epochs: int = 1,
                                 image_offset: int = 0,
                                 noise_rank: int | None = None,
                                 factor_scale: float = 0.3) -> FeatureSet:
    """Build a deterministic synthetic prompt set.

    Every epoch reuses the same per-image stripe layout but redraws feature
    noise, mimicking augmentation epochs over a fixed annotated set.  The
    depth variant emits smooth scalar fields and maps depth onto an arc
    between two prototypes so similar depths have similar features.

    ``image_offset`` shifts the per-image streams, giving a set disjoint from
    (but drawn from the same prototypes as) another set with the same seed.
    ``noise_rank`` switches to low-rank noise (shared factors plus a sigma
    residual), the regime approximate search is meant for.
    """
    protos = synthetic_prototypes(dim, max(num_classes, 2 if task == DEPTH else 1), seed)
    factors = synthetic_factors(dim, noise_rank, seed) if noise_rank else None
    all_epochs = []
    for epoch in range(epochs):
        images = []
        for idx in range(num_images):
            img = idx + image_offset
            layout_rng = np.random.default_rng([seed, _LAYOUT_SALT, img])
            noise_rng = np.random.default_rng([seed, _NOISE_SALT, img, epoch])
            if task == SEGMENTATION:
                rows = _stripe_rows(height, num_classes, layout_rng)
                base = protos[rows]  # (H, dim)
                feats = np.empty((height * width, dim), dtype=np.float64)
                for r in range(height):
                    feats[r * width:(r + 1) * width] = _noisy_unit(
                        np.tile(base[r], (width, 1)), noise_sigma, noise_rng,
                        factors, factor_scale)
                cls_map = np.repeat(np.repeat(rows[:, None], PATCH_SIZE * width, axis=1),
                                    PATCH_SIZE, axis=0).astype(np.uint16)
                labels = PixelLabels(SEGMENTATION, classes=cls_map)
            else:
                drows = _depth_rows(height, layout_rng)
                theta = (drows - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN) * (np.pi / 2)
                base = np.cos(theta)[:, None] * protos[0] + np.sin(theta)[:, None] * protos[1]
                base /= np.linalg.norm(base, axis=1, keepdims=True)
                feats = np.empty((height * width, dim), dtype=np.float64)
                for r in range(height):
                    feats[r * width:(r + 1) * width] = _noisy_unit(
                        np.tile(base[r], (width, 1)), noise_sigma, noise_rng,
                        factors, factor_scale)
                depth_map = np.repeat(np.repeat(drows[:, None], PATCH_SIZE * width, axis=1),
                                      PATCH_SIZE, axis=0).astype(np.float32)
                labels = PixelLabels(DEPTH, depth=depth_map,
                                     valid=np.ones_like(depth_map, dtype=bool))
            grid = FeatureGrid(img, height, width, feats.astype(np.float32))
            images.append((grid, labels))
        all_epochs.append(images)
    return FeatureSet(task, num_classes if task == SEGMENTATION else 0, all_epochs)
