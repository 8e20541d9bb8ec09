"""Box arithmetic, search-region crops and the jittered crop sampler.

Coordinates are continuous image pixels: pixel ``(i, j)`` covers
``[j, j + 1) x [i, i + 1)`` so its center sits at ``(j + 0.5, i + 0.5)``.
Boxes stay float everywhere; nothing is snapped to integers here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``(x, y, w, h)`` with ``(x, y)`` the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box {vals}: w and h must be > 0")

    @classmethod
    def from_ltrb(cls, left: float, top: float, right: float, bottom: float) -> "Box":
        return cls(left, top, right - left, bottom - top)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, w, h)

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_ltrb(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return (cx, cy, self.w, self.h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def clamp(self, width: float, height: float, min_size: float = 1.0) -> "Box":
        """Clip to ``[0, width] x [0, height]`` keeping each side >= ``min_size``."""
        min_w = min(min_size, width)
        min_h = min(min_size, height)
        if (self.x >= 0 and self.y >= 0 and self.right <= width and self.bottom <= height
                and self.w >= min_w and self.h >= min_h):
            return self
        left = min(max(self.x, 0.0), width - min_w)
        top = min(max(self.y, 0.0), height - min_h)
        right = max(min(self.right, width), left + min_w)
        bottom = max(min(self.bottom, height), top + min_h)
        return Box.from_ltrb(left, top, right, bottom)


@dataclass(frozen=True)
class CropSpec:
    """Source-image region (center, size as ``(h, w)``) and square output size."""

    center: tuple[float, float]
    size: tuple[float, float]
    out_size: int = 256

    def __post_init__(self):
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise ValueError(f"degenerate crop size {self.size}")
        if self.out_size <= 0:
            raise ValueError(f"out_size must be positive, got {self.out_size}")


@dataclass(frozen=True)
class CropTransform:
    """Per-axis affine map ``crop = (image - offset) * scale``."""

    offset: tuple[float, float]
    scale: tuple[float, float]

    @classmethod
    def identity(cls) -> "CropTransform":
        return cls((0.0, 0.0), (1.0, 1.0))

    @classmethod
    def from_spec(cls, spec: CropSpec) -> "CropTransform":
        h, w = spec.size
        cx, cy = spec.center
        return cls((cx - 0.5 * w, cy - 0.5 * h), (spec.out_size / w, spec.out_size / h))

    def forward(self, x, y):
        return ((x - self.offset[0]) * self.scale[0], (y - self.offset[1]) * self.scale[1])

    def inverse(self, u, v):
        return (u / self.scale[0] + self.offset[0], v / self.scale[1] + self.offset[1])


@dataclass(frozen=True)
class JitterParams:
    """Scale and center jitter factors of the test-crop sampler."""

    f_s: float = 0.25
    f_c: float = 0.25

    def __post_init__(self):
        if self.f_s < 0 or self.f_c < 0:
            raise ValueError("jitter factors must be nonnegative")


def iou(a: Box, b: Box) -> float:
    iw = min(a.right, b.right) - max(a.x, b.x)
    ih = min(a.bottom, b.bottom) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # rounding can push identical boxes a few ulps past 1
    return min(inter / (a.area + b.area - inter), 1.0)


def iou_many(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two ``(N, 4)`` arrays of ``x, y, w, h`` boxes."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    left = np.maximum(pred[:, 0], gt[:, 0])
    top = np.maximum(pred[:, 1], gt[:, 1])
    right = np.minimum(pred[:, 0] + pred[:, 2], gt[:, 0] + gt[:, 2])
    bottom = np.minimum(pred[:, 1] + pred[:, 3], gt[:, 1] + gt[:, 3])
    inter = np.clip(right - left, 0, None) * np.clip(bottom - top, 0, None)
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    return np.minimum(inter / union, 1.0)


def make_search_region(box: Box, factor: float = 2.0, out_size: int = 256) -> CropSpec:
    """Concentric region ``factor`` times the box size along each axis."""
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    return CropSpec(box.center, (factor * box.h, factor * box.w), out_size)


def crop_and_resize(frame: np.ndarray, spec: CropSpec, pad_value=None,
                    interpolation: int = cv2.INTER_LINEAR) -> tuple[np.ndarray, CropTransform]:
    """Bilinearly resample ``spec``'s region of ``frame`` to ``out_size`` squared.

    Pixels outside the frame take ``pad_value``; the default is the frame's
    per-channel mean. Returns the float32 crop and the image->crop transform.
    """
    frame = np.asarray(frame)
    if frame.size == 0:
        raise ValueError("empty frame")
    t = CropTransform.from_spec(spec)
    sx, sy = t.scale
    ox, oy = t.offset
    # dst pixel index -> src pixel index, both in cv2's pixel-center convention
    m = np.array([[1.0 / sx, 0.0, 0.5 / sx + ox - 0.5],
                  [0.0, 1.0 / sy, 0.5 / sy + oy - 0.5]])
    src = frame.astype(np.float32, copy=False)
    if pad_value is None:
        pad_value = src.reshape(-1, src.shape[2]).mean(axis=0) if src.ndim == 3 else float(src.mean())
    border = tuple(float(v) for v in np.atleast_1d(pad_value))
    border = border + (0.0,) * (4 - len(border)) if len(border) < 4 else border
    out = cv2.warpAffine(src, m, (spec.out_size, spec.out_size),
                         flags=interpolation | cv2.WARP_INVERSE_MAP,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=border)
    if src.ndim == 3 and out.ndim == 2:
        out = out[:, :, None]
    return out, t


def box_image_to_crop(box: Box, t: CropTransform) -> Box:
    left, top = t.forward(box.x, box.y)
    right, bottom = t.forward(box.right, box.bottom)
    return Box.from_ltrb(left, top, right, bottom)


def box_crop_to_image(box: Box, t: CropTransform) -> Box:
    left, top = t.inverse(box.x, box.y)
    right, bottom = t.inverse(box.right, box.bottom)
    return Box.from_ltrb(left, top, right, bottom)


def jitter_crop_spec(gt: Box, params: JitterParams, rng: np.random.Generator,
                     out_size: int = 256) -> CropSpec:
    """Randomly scaled and translated crop region around ``gt``.

    The size ``[h, w] = [2 h_gt, 2 w_gt] * exp(N * f_s)`` uses a 2-vector of
    standard normals; the center moves by ``(U - 0.5) * sqrt(h w) * f_c`` with
    ``U`` uniform on the unit square. ``N`` is drawn before ``U``.
    """
    n = rng.standard_normal(2)
    u = rng.random(2)
    h = 2.0 * gt.h * math.exp(n[0] * params.f_s)
    w = 2.0 * gt.w * math.exp(n[1] * params.f_s)
    o_max = math.sqrt(h * w) * params.f_c
    cx, cy = gt.center
    return CropSpec((cx + (u[0] - 0.5) * o_max, cy + (u[1] - 0.5) * o_max), (h, w), out_size)


def read_groundtruth(path) -> list[Box]:
    """Parse a ``x,y,w,h`` per-line file; errors name the offending line."""
    path = Path(path)
    boxes = []
    with path.open() as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace("\t", ",").split(",")
            try:
                if len(parts) != 4:
                    raise ValueError(f"expected 4 values, got {len(parts)}")
                boxes.append(Box(*(float(p) for p in parts)))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: malformed ground-truth line {line!r}: {e}") from None
    return boxes


def write_groundtruth(path, boxes: Iterable[Box]) -> None:
    with Path(path).open("w") as f:
        for b in boxes:
            f.write("{!r},{!r},{!r},{!r}\n".format(*map(float, b.to_xywh())))


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([b.to_xywh() for b in boxes], dtype=np.float64).reshape(-1, 4)
