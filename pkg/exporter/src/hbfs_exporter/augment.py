"""Evaluation-time augmentations applied jointly to image and label map.

Geometry first: the pair is rescaled by one random factor (bilinear for the
image, nearest for labels) and a crop of the original size is taken from the
result; rescales below 1 pad with black pixels and IGNORE labels before
cropping.  Photometric jitters then touch the image only.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .config import AugmentParams
from .hbfswriter import IGNORE_ID


def _resize(image: np.ndarray, size: tuple[int, int], nearest: bool) -> np.ndarray:
    mode = Image.Resampling.NEAREST if nearest else Image.Resampling.BILINEAR
    pil = Image.fromarray(image)
    return np.asarray(pil.resize((size[1], size[0]), mode))


def _jitter(u: float, rng: np.random.Generator, prob: float, max_adj: float) -> float:
    if rng.random() >= prob:
        return 0.0
    return float(rng.uniform(-max_adj, max_adj))


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    import colorsys
    flat = rgb.reshape(-1, 3)
    out = np.array([colorsys.rgb_to_hsv(*px) for px in flat])
    return out.reshape(rgb.shape)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    import colorsys
    flat = hsv.reshape(-1, 3)
    out = np.array([colorsys.hsv_to_rgb(*px) for px in flat])
    return out.reshape(hsv.shape)


def augment_pair(image: np.ndarray, labels: np.ndarray, params: AugmentParams,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One augmented (image, labels) pair; uint8 image in, uint8 image out.

    Labels are uint16 with IGNORE_ID marking unlabeled pixels and follow
    every geometric transform exactly (checked by the tests against a
    label-colored rendering of the image).
    """
    h, w = labels.shape
    if image.shape[:2] != (h, w):
        raise ValueError(f"image {image.shape[:2]} vs labels {labels.shape}")

    if rng.random() < params.crop_probability:
        scale = rng.uniform(params.min_scale, params.max_scale)
        nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
        image = _resize(image, (nh, nw), nearest=False)
        labels = _resize(labels, (nh, nw), nearest=True)
        if nh < h or nw < w:  # pad back up to croppable size
            pad_img = np.zeros((max(nh, h), max(nw, w), 3), dtype=np.uint8)
            pad_lab = np.full((max(nh, h), max(nw, w)), IGNORE_ID, dtype=np.uint16)
            pad_img[:nh, :nw] = image
            pad_lab[:nh, :nw] = labels
            image, labels = pad_img, pad_lab
            nh, nw = image.shape[:2]
        top = int(rng.integers(0, nh - h + 1))
        left = int(rng.integers(0, nw - w + 1))
        image = image[top:top + h, left:left + w]
        labels = labels[top:top + h, left:left + w]

    rgb = image.astype(np.float64) / 255.0
    b = _jitter(0, rng, params.brightness_probability, params.brightness_max)
    if b:
        rgb = rgb * (1.0 + b)
    c = _jitter(0, rng, params.contrast_probability, params.contrast_max)
    if c:
        mean = rgb.mean()
        rgb = mean + (rgb - mean) * (1.0 + c)
    s = _jitter(0, rng, params.saturation_probability, params.saturation_max)
    if s:
        gray = rgb @ np.array([0.299, 0.587, 0.114])
        rgb = gray[:, :, None] + (rgb - gray[:, :, None]) * (1.0 + s)
    hshift = _jitter(0, rng, params.hue_probability, params.hue_max)
    if hshift:
        hsv = _rgb_to_hsv(np.clip(rgb, 0, 1))
        hsv[:, :, 0] = (hsv[:, :, 0] + hshift) % 1.0
        rgb = _hsv_to_rgb(hsv)

    image = (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    return image, labels.astype(np.uint16)
