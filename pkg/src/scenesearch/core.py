"""Geometric and embedding primitives shared by every stage of the pipeline.

Everything here is a pure function on immutable inputs; no module-level state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np


class GeometryError(ValueError):
    """A box violates its coordinate invariants."""


class EmptyCropError(ValueError):
    """Requested crop lies fully outside the image."""


class DegenerateInputError(ValueError):
    """Input is degenerate (e.g. zero vector where a direction is needed)."""


class _UnlabeledType:
    """Singleton marker for a person annotation that carries no identity."""

    __slots__ = ()
    _instance: Optional["_UnlabeledType"] = None

    def __new__(cls) -> "_UnlabeledType":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNLABELED"


UNLABELED = _UnlabeledType()

# A labeled person is an int in [1, M]; UNLABELED marks an annotated person
# whose identity is unknown.
IdentityLabel = Union[int, _UnlabeledType]


def is_labeled(label: Optional[IdentityLabel]) -> bool:
    return isinstance(label, int)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image pixel coordinates, corner form.

    Right/bottom edges are exclusive: width = x2 - x1, height = y2 - y1.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates {coords}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise GeometryError(f"empty or inverted box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class Detection:
    """One localized person: geometry plus confidence, optionally an identity."""

    box: BoundingBox
    score: float
    identity: Optional[IdentityLabel] = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"confidence {self.score} outside [0, 1]")


@dataclass
class PersonCrop:
    """Resized person image carrying its identity and source-frame provenance."""

    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    identity: Optional[IdentityLabel]
    source: str

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"crop pixels must be (H, W, 3), got {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"crop pixel values outside [0, 1]: [{lo}, {hi}]")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint, 1 when identical."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def crop_and_resize(
    image: np.ndarray, box: BoundingBox, out_h: int, out_w: int
) -> np.ndarray:
    """Bilinear crop of `box` from an (H, W, 3) image, resampled to out_h x out_w.

    The box is clipped to the image bounds first; output pixel centers map to
    half-pixel source coordinates. Raises EmptyCropError when the box does not
    intersect the image.
    """
    pixels = np.asarray(image, dtype=np.float64)
    if pixels.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {pixels.shape}")
    h, w = pixels.shape[:2]
    x1, y1 = max(box.x1, 0.0), max(box.y1, 0.0)
    x2, y2 = min(box.x2, float(w)), min(box.y2, float(h))
    if x2 <= x1 or y2 <= y1:
        raise EmptyCropError(f"box {box} outside image of size {h}x{w}")
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output size must be positive")

    # half-pixel centers: output row r samples source y = y1 + (r+0.5)*bh/out_h,
    # expressed in pixel-index coordinates (pixel i covers [i, i+1)).
    sy = y1 + (np.arange(out_h) + 0.5) * (y2 - y1) / out_h - 0.5
    sx = x1 + (np.arange(out_w) + 0.5) * (x2 - x1) / out_w - 0.5

    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = sy - y0
    fx = sx - x0
    y0c = np.clip(y0.astype(np.int64), 0, h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    x0c = np.clip(x0.astype(np.int64), 0, w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, w - 1)

    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = pixels[y0c][:, x0c] * (1 - fx) + pixels[y0c][:, x1c] * fx
    bot = pixels[y1c][:, x0c] * (1 - fx) + pixels[y1c][:, x1c] * fx
    out = top * (1 - fy) + bot * fy
    return out.astype(np.float32)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit L2 norm, preserving direction."""
    arr = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not math.isfinite(norm):
        raise DegenerateInputError(f"cannot normalize vector with norm {norm}")
    out_dtype = v.dtype if isinstance(v, np.ndarray) and v.dtype.kind == "f" else np.float64
    return (arr / norm).astype(out_dtype)
