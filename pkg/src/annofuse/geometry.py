"""Axis-aligned box arithmetic.

Boxes are corner-encoded ``(x_min, y_min, x_max, y_max)`` in continuous pixel
coordinates with the origin at the top-left. Width is ``x_max - x_min``; there
is no "+1" pixel convention anywhere in the package.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class InvalidInputError(ValueError):
    """Raised when a box or numeric input violates its invariants."""


@dataclass(frozen=True, order=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidInputError(f"non-finite box coordinates {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InvalidInputError(f"box corners out of order {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_seq(cls, seq) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in seq)
        return cls(x0, y0, x1, y1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0.0 when the union is empty."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner arrays.

    Same arithmetic as :func:`iou`, vectorized. Returns an ``(N, M)`` array.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InvalidInputError("non-finite box coordinates")
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0.0) & (inter > 0.0))
    return np.minimum(out, 1.0)


def clip_to_image(b: Box, width: float, height: float) -> Box:
    """Clamp every coordinate into ``[0, width] x [0, height]``.

    Boxes fully outside the frame collapse to a zero-area box on the border.
    """
    if not (width > 0 and height > 0):
        raise InvalidInputError(f"image size must be positive, got {width}x{height}")
    return Box(
        min(max(b.x_min, 0.0), width),
        min(max(b.y_min, 0.0), height),
        min(max(b.x_max, 0.0), width),
        min(max(b.y_max, 0.0), height),
    )


def clip_array(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True).reshape(-1, 4)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, height)
    return out
