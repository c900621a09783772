"""Dataset traversal and HBFS assembly."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .augment import augment_pair
from .config import ExportConfig
from .encoder import load_encoder
from .hbfswriter import IGNORE_ID, write_segmentation_set

# Annotation PNGs store class indices per pixel; this value means unlabeled.
PNG_IGNORE = 255
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _find_pairs(root: Path) -> list[tuple[Path, Path]]:
    images_dir = root / "images"
    ann_dir = root / "annotations"
    if not images_dir.is_dir() or not ann_dir.is_dir():
        raise FileNotFoundError(
            f"expected {root}/images and {root}/annotations directories")
    pairs = []
    for img in sorted(images_dir.iterdir()):
        if img.suffix.lower() not in _IMAGE_SUFFIXES:
            continue
        ann = ann_dir / f"{img.stem}.png"
        if not ann.exists():
            raise FileNotFoundError(f"no annotation for {img.name}: {ann}")
        pairs.append((img, ann))
    if not pairs:
        raise FileNotFoundError(f"no images under {images_dir}")
    return pairs


def _load_pair(img_path: Path, ann_path: Path, size: int) -> tuple[np.ndarray, np.ndarray]:
    image = Image.open(img_path).convert("RGB")
    labels = Image.open(ann_path)
    if image.size != (size, size):
        image = image.resize((size, size), Image.Resampling.BILINEAR)
    if labels.size != (size, size):
        labels = labels.resize((size, size), Image.Resampling.NEAREST)
    lab = np.asarray(labels).astype(np.uint16)
    if lab.ndim == 3:
        lab = lab[:, :, 0].astype(np.uint16)
    lab = np.where(lab == PNG_IGNORE, IGNORE_ID, lab).astype(np.uint16)
    return np.asarray(image, dtype=np.uint8), lab


def export_features(cfg: ExportConfig) -> Path:
    """Encode the dataset into an HBFS file and return its path.

    Epoch 1 is the unaugmented pass; epochs 2+ re-run the images through the
    evaluation-time augmentations with per-(epoch, image) seeded streams, so
    the output is byte-deterministic for a given configuration.
    """
    encoder = load_encoder(cfg.encoder)
    pairs = _find_pairs(cfg.dataset)

    loaded = [_load_pair(img, ann, cfg.image_size) for img, ann in pairs]
    num_classes = cfg.num_classes
    if num_classes == 0:
        seen = max(int(lab[lab != IGNORE_ID].max(initial=0)) for _, lab in loaded)
        num_classes = seen + 1

    epochs = []
    for epoch in range(cfg.epochs):
        records = []
        for idx, (image, labels) in enumerate(loaded):
            if epoch > 0:
                rng = np.random.default_rng([cfg.seed, epoch, idx])
                image, labels = augment_pair(image, labels, cfg.augment, rng)
            bad = (labels != IGNORE_ID) & (labels >= num_classes)
            if bad.any():
                raise ValueError(
                    f"{pairs[idx][1]} holds class id {int(labels[bad].max())} "
                    f">= num_classes {num_classes}")
            records.append((idx, encoder.encode(image), labels))
        epochs.append(records)

    cfg.output.parent.mkdir(parents=True, exist_ok=True)
    cfg.output.write_bytes(
        write_segmentation_set(epochs, encoder.dim, num_classes))
    return cfg.output
