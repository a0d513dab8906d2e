"""Boxes, 9:16 crops and binary masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ASPECT_W, ASPECT_H = 9, 16


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels; ``x1``/``y1`` are exclusive."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError("box coordinates must be finite")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    def contains(self, other: "BBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def scaled(self, s: float) -> "BBox":
        """Expanded (or shrunk) by factor ``s`` about the center."""
        cx, cy = self.center
        hw, hh = self.width * s / 2, self.height * s / 2
        return BBox(cx - hw, cy - hh, cx + hw, cy + hh)

    def clipped(self, width: int, height: int) -> "BBox":
        return BBox(max(self.x0, 0.0), max(self.y0, 0.0), min(self.x1, float(width)),
                    min(self.y1, float(height)))

    @classmethod
    def lerp(cls, a: "BBox", b: "BBox", u: float) -> "BBox":
        return cls(*((1 - u) * p + u * q for p, q in zip(a.as_tuple(), b.as_tuple())))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BBox | None":
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            return None
        return cls(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@dataclass(frozen=True)
class CropSpec:
    rect: BBox          # integer crop rectangle
    box: BBox           # interpolated box the crop must contain
    u: float
    degraded: bool = False

    def to_dict(self) -> dict:
        return {"rect": list(self.rect.as_tuple()), "box": list(self.box.as_tuple()),
                "u": self.u, "degraded": self.degraded}

    def apply(self, image: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = (int(v) for v in self.rect.as_tuple())
        return image[y0:y1, x0:x1]


def aspect_height(box_w: int, box_h: int) -> int:
    """Smallest height ``H >= box_h`` whose 9:16 width ``round(H*9/16)`` is ``>= box_w``."""
    h = max(box_h, math.ceil(box_w * ASPECT_H / ASPECT_W) - 1, 1)
    while round(h * ASPECT_W / ASPECT_H) < box_w:
        h += 1
    return h


def _place(lo: float, hi: float, size: int, limit: int) -> int:
    """Start of a ``size`` window centered on ``[lo, hi)``, shifted to contain it and fit."""
    start = int(round((lo + hi) / 2 - size / 2))
    start = min(start, int(math.floor(lo)))
    start = max(start, int(math.ceil(hi)) - size)
    return int(min(max(start, 0), limit - size))


def adaptive_crop(image_size: tuple, face: BBox, body: BBox, scales: tuple = (3.0, 1.1),
                  rng: np.random.Generator | None = None, u: float | None = None) -> CropSpec:
    """Random face-to-body interpolated 9:16 crop.

    ``image_size`` is ``(height, width)``. If the image is too small for the
    required 9:16 rectangle, the size is clamped and ``degraded`` is set.
    """
    img_h, img_w = int(image_size[0]), int(image_size[1])
    if img_h < 1 or img_w < 1:
        raise ValueError("image extents must be positive")
    if u is None:
        u = float((rng or np.random.default_rng()).uniform(0.0, 1.0))
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must lie in [0, 1]")
    fe = face.scaled(scales[0]).clipped(img_w, img_h)
    be = body.scaled(scales[1]).clipped(img_w, img_h)
    box = BBox.lerp(fe, be, u)
    bw = int(math.ceil(box.x1)) - int(math.floor(box.x0))
    bh = int(math.ceil(box.y1)) - int(math.floor(box.y0))
    h = aspect_height(bw, bh)
    w = round(h * ASPECT_W / ASPECT_H)
    degraded = h > img_h or w > img_w
    if degraded:
        h, w = min(h, img_h), min(w, img_w)
    x0 = _place(box.x0, box.x1, w, img_w)
    y0 = _place(box.y0, box.y1, h, img_h)
    return CropSpec(BBox(x0, y0, x0 + w, y0 + h), box, u, degraded)


@dataclass
class MaskImage:
    """Binary map aligned to an image."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError("mask must be 2-D")
        if arr.dtype != bool:
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("mask values must be 0 or 1")
            arr = arr.astype(bool)
        self.data = arr

    @property
    def empty(self) -> bool:
        return not bool(self.data.any())

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def iou(self, other: "MaskImage") -> float:
        union = np.logical_or(self.data, other.data).sum()
        if union == 0:
            return 1.0
        return float(np.logical_and(self.data, other.data).sum() / union)

    def bbox(self) -> BBox | None:
        return BBox.from_mask(self.data)
