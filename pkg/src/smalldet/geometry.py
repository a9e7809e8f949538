"""Axis-aligned boxes in pixel units (top-left corner plus size)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

Point = Tuple[float, float]


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"box field {name} must be finite, got {getattr(self, name)!r}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Point:
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(x1, y1, x2 - x1, y2 - y1)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, w, h)

    def to_cxcywh(self) -> Tuple[float, float, float, float]:
        cx, cy = self.center
        return (cx, cy, self.w, self.h)


@dataclass(frozen=True)
class NormalizedPoint:
    """A reference point in [0, 1]^2, relative to image width/height."""

    px: float
    py: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.px <= 1.0 and 0.0 <= self.py <= 1.0):
            raise ValueError(f"normalized point out of [0,1]^2: ({self.px}, {self.py})")

    @classmethod
    def from_pixels(cls, x: float, y: float, image_size: Tuple[float, float]) -> "NormalizedPoint":
        width, height = image_size
        return cls(min(max(x / width, 0.0), 1.0), min(max(y / height, 0.0), 1.0))


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    # x2 - x can round away from w; keep the result in [0, 1]
    return min(inter / (a.area + b.area - inter), 1.0)


def area_ratio(pred: Box, gt: Box) -> float:
    """Predicted area over ground-truth area; 1.0 means the scales agree."""
    return pred.area / gt.area


def contains(b: Box, point: Point) -> bool:
    # closed box: edges count as inside
    px, py = point
    return b.x <= px <= b.x2 and b.y <= py <= b.y2


def expand(b: Box, eta: float) -> Box:
    if eta < 1.0:
        raise ValueError(f"expansion factor must be >= 1, got {eta}")
    if eta == 1.0:
        return b
    cx, cy = b.center
    return Box.from_cxcywh(cx, cy, eta * b.w, eta * b.h)
