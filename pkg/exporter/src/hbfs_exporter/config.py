"""Export configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class AugmentParams:
    """Evaluation-time augmentation knobs.

    A random crop is always taken from the image rescaled by a factor drawn
    in [min_scale, max_scale]; each photometric jitter fires independently
    with its probability and a uniform adjustment within +/- its max.
    """

    crop_probability: float = 1.0
    min_scale: float = 0.5
    max_scale: float = 2.0
    brightness_probability: float = 0.5
    contrast_probability: float = 0.5
    saturation_probability: float = 0.5
    hue_probability: float = 0.5
    brightness_max: float = 0.1
    contrast_max: float = 0.1
    saturation_max: float = 0.1
    hue_max: float = 0.1


@dataclass
class ExportConfig:
    dataset: Path
    output: Path
    encoder: str = "linear16-d64"
    image_size: int = 64
    epochs: int = 1
    num_classes: int = 0  # 0 = infer from the annotations
    seed: int = 0
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        self.dataset = Path(self.dataset)
        self.output = Path(self.output)
        if self.image_size % 16:
            raise ValueError(f"image size {self.image_size} must be divisible by 16")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
