import math
from dataclasses import dataclass

from .exceptions import StructuralError


@dataclass(frozen=True, order=True)
class BBox:
    """
    Axis-aligned rectangle in pixel units, XYXY format.
    Width is x_max - x_min, coordinates are continuous so fused boxes need not be integer aligned.
    """
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = self.as_tuple()
        if not all(math.isfinite(c) for c in coords):
            raise StructuralError(f"box coordinates must be finite, got {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise StructuralError(f"box corners are inverted: {coords}")

    @classmethod
    def from_sequence(cls, values):
        if len(values) != 4:
            raise StructuralError(f"a box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def expand(self, margin: float, width: float, height: float) -> "BBox":
        """Grows the box by margin on every side and clamps it to [0, width] x [0, height]."""
        return BBox(max(0.0, self.x_min - margin),
                    max(0.0, self.y_min - margin),
                    min(float(width), self.x_max + margin),
                    min(float(height), self.y_max + margin))

    def within(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


@dataclass(frozen=True)
class Detection:
    image_id: str
    model_id: str
    class_id: int
    box: BBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise StructuralError(f"score must lie in [0, 1], got {self.score} for image {self.image_id}")
        if not isinstance(self.box, BBox):
            raise StructuralError(f"box must be a BBox, got {type(self.box).__name__}")

    def with_score(self, score: float) -> "Detection":
        return Detection(self.image_id, self.model_id, self.class_id, self.box, score)

    def with_box(self, box: BBox) -> "Detection":
        return Detection(self.image_id, self.model_id, self.class_id, box, self.score)


def ranking_key(det: Detection):
    """
    Total order used everywhere a list of detections is sorted:
    descending score, then model_id, then box coordinates.
    """
    return (-det.score, det.model_id, det.box.as_tuple(), det.image_id, det.class_id)


def sort_detections(dets) -> list[Detection]:
    return sorted(dets, key=ranking_key)


def area(box: BBox) -> float:
    return (box.x_max - box.x_min) * (box.y_max - box.y_min)


def intersection_area(b1: BBox, b2: BBox) -> float:
    w = min(b1.x_max, b2.x_max) - max(b1.x_min, b2.x_min)
    h = min(b1.y_max, b2.y_max) - max(b1.y_min, b2.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(b1: BBox, b2: BBox) -> float:
    inter = intersection_area(b1, b2)
    union = area(b1) + area(b2) - inter
    if union <= 0:
        # two degenerate boxes
        return 0.0
    return min(1.0, max(0.0, inter / union))


def envelope(boxes) -> BBox:
    """Coordinate-wise min/max hull of a group of boxes."""
    boxes = list(boxes)
    return BBox(min(b.x_min for b in boxes), min(b.y_min for b in boxes),
                max(b.x_max for b in boxes), max(b.y_max for b in boxes))


def weighted_mean_box(boxes, weights) -> BBox:
    """
    Weight-normalized coordinate average. The result is clamped to the envelope of
    the inputs so floating point rounding never pushes it outside the hull.
    """
    boxes = list(boxes)
    weights = list(weights)
    total = sum(weights)
    if total <= 0:
        weights = [1.0] * len(boxes)
        total = float(len(boxes))
    coords = []
    for i in range(4):
        value = sum(w * b.as_tuple()[i] for b, w in zip(boxes, weights)) / total
        low = min(b.as_tuple()[i] for b in boxes)
        high = max(b.as_tuple()[i] for b in boxes)
        coords.append(min(high, max(low, value)))
    return BBox(*coords)
