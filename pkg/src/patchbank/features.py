"""Feature grids, pixel labels, and per-patch label averaging.

A feature grid is an H x W raster of D-dimensional patch descriptors produced
by some frozen encoder.  Pixel labels live at 16x the patch resolution; this
module reduces them to one label per patch (a class histogram for
segmentation, a mean for depth) so they can be stored next to the features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError

PATCH_SIZE = 16
SEGMENTATION = "segmentation"
DEPTH = "depth"
TASKS = (SEGMENTATION, DEPTH)

# Reserved class id marking unlabeled pixels; the maximum value a u16 label
# raster can hold.
IGNORE_ID = 0xFFFF


def _check_task(task: str) -> None:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")


@dataclass(frozen=True)
class FeatureGrid:
    """Row-major raster of patch features for one image."""

    image_id: int
    height: int
    width: int
    features: np.ndarray  # (height*width, dim) float32

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ShapeMismatchError(
                f"grid must be at least 1x1, got {self.height}x{self.width}")
        f = self.features
        if f.ndim != 2 or f.shape[0] != self.height * self.width:
            raise ShapeMismatchError(
                f"features shape {f.shape} does not match "
                f"{self.height}x{self.width} patches")
        if f.shape[1] < 1:
            raise ShapeMismatchError("feature dimension must be >= 1")
        if not np.all(np.isfinite(f)):
            raise ValueError("features contain non-finite values")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PixelLabels:
    """Dense per-pixel annotations aligned with a feature grid.

    Exactly one of the two label families is populated: ``classes`` for
    segmentation (IGNORE_ID marks unlabeled pixels), or ``depth`` plus
    ``valid`` for depth estimation.
    """

    task: str
    classes: np.ndarray | None = None  # (H', W') uint16
    depth: np.ndarray | None = None    # (H', W') float32
    valid: np.ndarray | None = None    # (H', W') bool

    def __post_init__(self):
        _check_task(self.task)
        if self.task == SEGMENTATION:
            if self.classes is None or self.classes.ndim != 2:
                raise ShapeMismatchError("segmentation labels need a 2-D class map")
        else:
            if self.depth is None or self.valid is None:
                raise ShapeMismatchError("depth labels need depth and valid maps")
            if self.depth.shape != self.valid.shape or self.depth.ndim != 2:
                raise ShapeMismatchError(
                    f"depth map {self.depth.shape} and validity mask "
                    f"{self.valid.shape} must be equal 2-D shapes")
            if not np.all(np.isfinite(self.depth[self.valid])):
                raise ValueError("depth values must be finite where valid")

    @property
    def shape(self) -> tuple[int, int]:
        m = self.classes if self.task == SEGMENTATION else self.depth
        return m.shape  # type: ignore[union-attr]


@dataclass(frozen=True)
class PatchLabel:
    """Average label of one 16x16 pixel patch.

    For segmentation ``data`` is a length ``num_classes + 1`` vector: a class
    histogram followed by the fraction of IGNORE pixels.  For depth it is
    ``[mean_depth, valid_fraction]``.
    """

    task: str
    data: np.ndarray
    flagged: bool = False

    @property
    def histogram(self) -> np.ndarray:
        return self.data[:-1]

    @property
    def ignore_fraction(self) -> float:
        return float(self.data[-1])

    @property
    def mean_depth(self) -> float:
        return float(self.data[0])

    @property
    def valid_fraction(self) -> float:
        return float(self.data[1]) if self.task == DEPTH else 1.0 - self.ignore_fraction


@dataclass(frozen=True)
class PatchLabelGrid:
    """H x W grid of patch labels stored channel-last for vector math.

    ``values`` has shape (H, W, num_classes + 1) for segmentation (histogram
    channels then ignore fraction) and (H, W, 2) for depth (mean depth then
    valid fraction).  Decoding may attach a boolean ``flags`` grid marking
    patches whose retrieved labels were degenerate.
    """

    task: str
    values: np.ndarray
    flags: np.ndarray | None = None

    def __post_init__(self):
        _check_task(self.task)
        if self.values.ndim != 3:
            raise ShapeMismatchError("patch label values must be (H, W, C)")
        if self.flags is not None and self.flags.shape != self.values.shape[:2]:
            raise ShapeMismatchError("flags must match the patch grid shape")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def num_classes(self) -> int:
        return self.values.shape[2] - 1 if self.task == SEGMENTATION else 0

    def at(self, row: int, col: int) -> PatchLabel:
        flagged = bool(self.flags[row, col]) if self.flags is not None else False
        return PatchLabel(self.task, self.values[row, col].copy(), flagged=flagged)

    def flat_values(self) -> np.ndarray:
        """(H*W, channels) view in raster order."""
        return self.values.reshape(-1, self.values.shape[2])


@dataclass
class FeatureSet:
    """A prompt: feature grids plus labels, possibly over several
    augmentation epochs of the same images."""

    task: str
    num_classes: int  # 0 for depth
    epochs: list[list[tuple[FeatureGrid, PixelLabels]]] = field(default_factory=list)

    def __post_init__(self):
        _check_task(self.task)
        if len(self.epochs) < 1:
            raise ValueError("a feature set needs at least one epoch")
        dims = {g.dim for epoch in self.epochs for g, _ in epoch}
        if len(dims) > 1:
            raise ShapeMismatchError(f"mixed feature dimensions in set: {sorted(dims)}")

    @property
    def dim(self) -> int:
        for epoch in self.epochs:
            for grid, _ in epoch:
                return grid.dim
        raise ValueError("feature set holds no images")

    @property
    def num_images(self) -> int:
        return len(self.epochs[0])


def patchify_labels(labels: PixelLabels, height: int, width: int,
                    num_classes: int = 0) -> PatchLabelGrid:
    """Average pixel labels over each 16x16 block.

    Segmentation pixels vote one-hot into the histogram; IGNORE pixels
    contribute to a separate ignore fraction so histogram mass plus ignore
    mass is exactly 1.  Depth averages valid pixels only and records the
    valid fraction.
    """
    want = (height * PATCH_SIZE, width * PATCH_SIZE)
    if labels.shape != want:
        raise ShapeMismatchError(
            f"label raster {labels.shape} does not match {height}x{width} "
            f"patches of {PATCH_SIZE}px (expected {want})")

    px = PATCH_SIZE * PATCH_SIZE
    if labels.task == SEGMENTATION:
        if num_classes < 1:
            raise ValueError("segmentation patchify needs num_classes >= 1")
        cls = labels.classes.astype(np.int64)
        if not np.all((cls < num_classes) | (cls == IGNORE_ID)):
            bad = int(cls[(cls >= num_classes) & (cls != IGNORE_ID)].max())
            raise ValueError(f"class id {bad} out of range for {num_classes} classes")
        blocks = cls.reshape(height, PATCH_SIZE, width, PATCH_SIZE).transpose(0, 2, 1, 3)
        blocks = blocks.reshape(height, width, px)
        values = np.zeros((height, width, num_classes + 1), dtype=np.float64)
        for c in range(num_classes):
            values[:, :, c] = np.count_nonzero(blocks == c, axis=2)
        values[:, :, num_classes] = np.count_nonzero(blocks == IGNORE_ID, axis=2)
        values /= px
        return PatchLabelGrid(SEGMENTATION, values)

    depth = labels.depth.astype(np.float64).reshape(
        height, PATCH_SIZE, width, PATCH_SIZE).transpose(0, 2, 1, 3).reshape(height, width, px)
    valid = labels.valid.reshape(
        height, PATCH_SIZE, width, PATCH_SIZE).transpose(0, 2, 1, 3).reshape(height, width, px)
    count = valid.sum(axis=2)
    total = np.where(valid, depth, 0.0).sum(axis=2)
    values = np.zeros((height, width, 2), dtype=np.float64)
    np.divide(total, count, out=values[:, :, 0], where=count > 0)
    values[:, :, 1] = count / px
    return PatchLabelGrid(DEPTH, values)
