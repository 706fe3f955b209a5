"""Box representations, IoU and greedy non-maximum suppression."""

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in corner form, pixel units."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"inverted box {self}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_xywh(self):
        """Center form ``(cx, cy, w, h)``."""
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2, self.width, self.height)

    @classmethod
    def from_xywh(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def contains(self, px, py):
        return self.x1 <= px <= self.x2 and self.y1 <= py <= self.y2


@dataclass(frozen=True)
class EdgeOffsets:
    """Distances from a reference point to the top, bottom, left and right edges."""

    t: float
    b: float
    l: float  # noqa: E741
    r: float

    def __post_init__(self):
        if min(self.t, self.b, self.l, self.r) < 0:
            raise ValueError(f"negative edge offset in {self}")

    def as_tuple(self):
        return (self.t, self.b, self.l, self.r)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_index: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def to_offsets(box, point):
    px, py = point
    if not box.contains(px, py):
        raise ValueError(f"point {point} lies outside {box}")
    return EdgeOffsets(t=py - box.y1, b=box.y2 - py, l=px - box.x1, r=box.x2 - px)


def from_offsets(off, point):
    px, py = point
    return BoundingBox(px - off.l, py - off.t, px + off.r, py + off.b)


def iou(a, b):
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def boxes_array(boxes):
    if not boxes:
        return np.zeros((0, 4))
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def nms(dets, iou_threshold):
    """Greedy class-wise NMS.

    Detections are visited by descending score (stable, so ties keep input
    order); one is accepted when its IoU with every accepted detection of the
    same class is at most ``iou_threshold``. Output is in acceptance order.
    """
    dets = list(dets)
    if len(dets) <= 1:
        return dets
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = boxes_array([dets[i].box for i in order])
    classes = np.array([dets[i].class_index for i in order], dtype=np.int64)
    keep = kernels.nms_keep(boxes, classes, iou_threshold)
    return [dets[i] for i, k in zip(order, keep) if k]
