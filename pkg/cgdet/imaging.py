"""
CT preprocessing: Hounsfield windowing, attention mask inference for the local classifier branch,
and the derivation of slice labels and (expanded) box annotations from lesion masks.

Images are 2-D numpy arrays indexed [row, col]; width is the number of columns.
"""

import math
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import constants
from .exceptions import ConfigurationError, StructuralError
from .geometry import BBox

EIGHT_CONNECTIVITY = np.ones((3, 3), dtype=int)


def _as_2d(values, dtype, name):
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 2:
        raise StructuralError(f"{name} must be two dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class HUImage:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_2d(self.values, np.int32, "HUImage"))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class GrayImage:
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise StructuralError(f"gray levels must lie in [0, 255], got [{arr.min()}, {arr.max()}]")
        object.__setattr__(self, "values", _as_2d(arr, np.uint8, "GrayImage"))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray

    def __post_init__(self):
        arr = _as_2d(self.values, np.float64, "Heatmap")
        if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
            raise StructuralError("heatmap values must be finite and lie in [0, 1]")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_2d(self.values, bool, "BinaryMask"))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    level: float = constants.WINDOW_LEVEL
    width: float = constants.WINDOW_WIDTH

    def __post_init__(self):
        if not self.width > 0:
            raise ConfigurationError(f"window width must be positive, got {self.width}")

    @property
    def lower(self) -> float:
        return self.level - self.width / 2

    @property
    def upper(self) -> float:
        return self.level + self.width / 2


@dataclass(frozen=True)
class OtsuResult:
    threshold: int
    degenerate: bool


@dataclass(frozen=True, eq=False)
class AttentionResult:
    box: BBox
    mask: BinaryMask
    threshold: int
    degenerate: bool


def window(img: HUImage, spec: WindowSpec = WindowSpec()) -> GrayImage:
    """Maps [WL - WW/2, WL + WW/2] linearly onto [0, 255], clamping outside, rounding half up."""
    scaled = 255.0 * (img.values.astype(np.float64) - spec.lower) / spec.width
    scaled = np.clip(scaled, 0.0, 255.0)
    # values are nonnegative here, so floor(x + 0.5) rounds ties away from zero
    return GrayImage(np.floor(scaled + 0.5).astype(np.uint8))


def otsu_threshold(img: GrayImage) -> OtsuResult:
    """
    Threshold maximizing the between-class variance of the 256 bin histogram, pixels above it are
    foreground. The variance is compared in exact integer arithmetic; on ties the smallest threshold wins.
    """
    if img.values.size == 0:
        raise StructuralError("otsu threshold of an empty image")
    hist = np.bincount(img.values.ravel(), minlength=256)
    present = np.flatnonzero(hist)
    if len(present) == 1:
        logging.info(f"otsu threshold is degenerate, the image is constant at {present[0]}")
        return OtsuResult(int(present[0]), True)

    total_count = int(hist.sum())
    total_sum = int(np.dot(np.arange(256, dtype=np.int64), hist))
    best_t, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += int(hist[t])
        s0 += t * int(hist[t])
        n1 = total_count - n0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance up to the constant factor 1 / N^2
        num = (s0 * total_count - total_sum * n0) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return OtsuResult(best_t, False)


def quantize(h: Heatmap) -> GrayImage:
    return GrayImage(np.floor(h.values * 255.0 + 0.5).astype(np.uint8))


def binarize(h: Heatmap, tau: float) -> BinaryMask:
    return BinaryMask(h.values > tau)


def heatmap_from_features(features) -> Heatmap:
    """
    Collapses a C x H x W stack of feature maps into a heatmap: the maximum absolute activation over
    channels at every position, min-max normalized to [0, 1]. A constant map becomes all zeros.
    """
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 3:
        arr = np.abs(arr).max(axis=0)
    elif arr.ndim == 2:
        arr = np.abs(arr)
    else:
        raise StructuralError(f"feature maps must have 2 or 3 dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise StructuralError("feature maps contain non finite values")
    low, high = arr.min(), arr.max()
    if high <= low:
        return Heatmap(np.zeros_like(arr))
    return Heatmap(np.clip((arr - low) / (high - low), 0.0, 1.0))


def _label_components(mask: BinaryMask):
    """Component labels with 8-connectivity, ordered by the scan position of their first pixel."""
    labels, count = ndimage.label(mask.values, structure=EIGHT_CONNECTIVITY)
    if count == 0:
        return labels, []
    ids, first = np.unique(labels.ravel(), return_index=True)
    ordered = [int(i) for _, i in sorted(zip(first, ids)) if i != 0]
    return labels, ordered


def largest_component(mask: BinaryMask) -> BinaryMask:
    labels, ordered = _label_components(mask)
    if not ordered:
        return BinaryMask(np.zeros_like(mask.values))
    sizes = np.bincount(labels.ravel())
    # max keeps the first of equally large components, which is the one starting earliest in scan order
    best = max(ordered, key=lambda label: sizes[label])
    return BinaryMask(labels == best)


def component_boxes(mask: BinaryMask) -> list[BBox]:
    labels, ordered = _label_components(mask)
    slices = ndimage.find_objects(labels)
    boxes = []
    for label in ordered:
        rows, cols = slices[label - 1]
        boxes.append(BBox(float(cols.start), float(rows.start), float(cols.stop), float(rows.stop)))
    return boxes


def full_image_box(image_w: int, image_h: int) -> BBox:
    return BBox(0.0, 0.0, float(image_w), float(image_h))


def infer_attention(h: Heatmap, image_w: int, image_h: int) -> AttentionResult:
    """
    Otsu threshold of the quantized heatmap, largest 8-connected foreground component, tight box
    rescaled from heatmap to image coordinates. Falls back to the whole image when the heatmap is
    constant or nothing is foreground.
    """
    if image_w <= 0 or image_h <= 0:
        raise StructuralError(f"image size must be positive, got {image_w}x{image_h}")
    gray = quantize(h)
    otsu = otsu_threshold(gray)
    if otsu.degenerate:
        return AttentionResult(full_image_box(image_w, image_h), BinaryMask(np.zeros_like(h.values, dtype=bool)), otsu.threshold, True)

    # same divisor on both sides, so the comparison equals gray > threshold exactly
    mask = largest_component(binarize(Heatmap(gray.values / 255.0), otsu.threshold / 255.0))
    boxes = component_boxes(mask)
    if not boxes:
        return AttentionResult(full_image_box(image_w, image_h), mask, otsu.threshold, True)

    sx = image_w / h.width
    sy = image_h / h.height
    box = boxes[0]
    scaled = BBox(max(0.0, box.x_min * sx), max(0.0, box.y_min * sy),
                  min(float(image_w), box.x_max * sx), min(float(image_h), box.y_max * sy))
    return AttentionResult(scaled, mask, otsu.threshold, False)


def attention_crop(h: Heatmap, image_w: int, image_h: int) -> BBox:
    return infer_attention(h, image_w, image_h).box


def crop_image(img: np.ndarray, box: BBox) -> np.ndarray:
    """Pixels covered by the box, rounding its corners outwards to whole pixels."""
    height, width = img.shape[:2]
    x0 = max(0, math.floor(box.x_min))
    y0 = max(0, math.floor(box.y_min))
    x1 = min(width, math.ceil(box.x_max))
    y1 = min(height, math.ceil(box.y_max))
    return img[y0:y1, x0:x1]


def mask_to_label(mask: BinaryMask) -> str:
    return constants.LABEL_PE if mask.values.any() else constants.LABEL_NON_PE


def mask_to_annotations(mask: BinaryMask, margin: int = constants.ANNOTATION_MARGIN) -> list[BBox]:
    """One box per lesion component, grown by margin pixels on each side to include arterial context."""
    if margin < 0:
        raise ConfigurationError(f"annotation margin must be nonnegative, got {margin}")
    return [box.expand(margin, mask.width, mask.height) for box in component_boxes(mask)]
