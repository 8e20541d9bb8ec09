"""Synthetic tracking sequences with exact masks, plus on-disk sequence I/O.

Disk layout of one sequence::

    <name>/groundtruth.txt      x,y,w,h per line
    <name>/img/00000.png ...    frames (RGB stored as PNG)
    <name>/mask/00000.png ...   binary masks (0/255), optional
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .geometry import Box, read_groundtruth, write_groundtruth

OBJECT_KINDS = ("ellipse", "rectangle", "polygon")


@dataclass
class Sequence:
    name: str
    frames: np.ndarray  # (N, H, W, 3) uint8
    boxes: list
    masks: Optional[np.ndarray] = None  # (N, H, W) uint8 in {0, 1}

    def __len__(self):
        return len(self.frames)

    @property
    def image_size(self) -> tuple[int, int]:
        """``(height, width)`` of the frames."""
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class SyntheticSpec:
    """Knobs of the moving-object generator. Sizes are fractions of image width."""

    num_sequences: int = 20
    seq_length: int = 40
    image_size: tuple = (128, 128)
    object_kinds: tuple = OBJECT_KINDS
    object_size: tuple = (0.15, 0.35)
    aspect_range: tuple = (0.5, 2.0)
    max_speed: float = 3.0
    max_log_scale_step: float = 0.02
    deformation: float = 0.05
    max_rotation_step: float = 0.05
    background_noise: float = 12.0
    num_distractors: int = 1
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.object_kinds = tuple(self.object_kinds)
        self.object_size = tuple(self.object_size)
        self.aspect_range = tuple(self.aspect_range)
        bad = set(self.object_kinds) - set(OBJECT_KINDS)
        if bad:
            raise ValueError(f"unknown object kinds {sorted(bad)}")
        if self.num_sequences < 1 or self.seq_length < 1:
            raise ValueError("num_sequences and seq_length must be >= 1")


def mask_bounding_box(mask: np.ndarray) -> Box:
    """Inclusive pixel extent of the nonzero region as a float box."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1))


def _shape_outline(kind, rng):
    """Unit-radius outline in object coordinates, as an (M, 2) array."""
    if kind == "ellipse":
        t = np.linspace(0, 2 * np.pi, 48, endpoint=False)
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if kind == "rectangle":
        return np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
    k = int(rng.integers(5, 9))
    t = np.sort(rng.uniform(0, 2 * np.pi, k))
    r = rng.uniform(0.55, 1.0, k)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _background(rng, h, w, noise):
    coarse = rng.uniform(40, 215, size=(4, 4, 3)).astype(np.float32)
    bg = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    fine = rng.normal(0, noise, size=(h // 4 + 1, w // 4 + 1, 3)).astype(np.float32)
    bg += cv2.resize(fine, (w, h), interpolation=cv2.INTER_LINEAR)
    return bg


class _Texture:
    """Striped two-tone fill evaluated in object-centered coordinates."""

    def __init__(self, rng):
        self.base = rng.uniform(0, 255, size=3).astype(np.float32)
        self.second = rng.uniform(0, 255, size=3).astype(np.float32)
        self.amp = rng.uniform(20, 60)
        self.freq = rng.uniform(0.15, 0.5)
        self.ang = rng.uniform(0, np.pi)

    def sample(self, ys, xs, cx, cy, angle):
        a = self.ang + angle
        u = (xs + 0.5 - cx) * math.cos(a) + (ys + 0.5 - cy) * math.sin(a)
        wave = np.sin(self.freq * u)[:, None].astype(np.float32)
        mix = 0.5 + 0.5 * wave
        return np.clip(self.base * mix + self.second * (1 - mix) * 0.3 + self.amp * wave, 0, 255)


class _MovingShape:
    def __init__(self, rng, spec, h, w):
        self.kind = spec.object_kinds[int(rng.integers(len(spec.object_kinds)))]
        self.outline = _shape_outline(self.kind, rng)
        self.radius = 0.5 * w * rng.uniform(*spec.object_size)
        self.log_aspect = rng.uniform(math.log(spec.aspect_range[0]), math.log(spec.aspect_range[1]))
        self.angle = rng.uniform(0, np.pi) if self.kind == "polygon" else 0.0
        self.cx = rng.uniform(0.3, 0.7) * w
        self.cy = rng.uniform(0.3, 0.7) * h
        speed = rng.uniform(0, spec.max_speed)
        heading = rng.uniform(0, 2 * np.pi)
        self.vx, self.vy = speed * math.cos(heading), speed * math.sin(heading)
        self.scale_step = rng.uniform(-spec.max_log_scale_step, spec.max_log_scale_step)
        self.rot_step = rng.uniform(-spec.max_rotation_step, spec.max_rotation_step) if self.kind == "polygon" else 0.0
        self.deform_amp = spec.deformation
        self.deform_phase = rng.uniform(0, 2 * np.pi)
        self.texture = _Texture(rng)
        self.w, self.h = w, h
        self.min_r = 0.04 * w
        self.max_r = 0.5 * w * spec.object_size[1] * 1.2

    def polygon(self, t):
        aspect = math.exp(self.log_aspect + self.deform_amp * math.sin(0.3 * t + self.deform_phase))
        sx, sy = self.radius * math.sqrt(aspect), self.radius / math.sqrt(aspect)
        c, s = math.cos(self.angle), math.sin(self.angle)
        pts = self.outline * np.array([sx, sy])
        pts = pts @ np.array([[c, s], [-s, c]])
        return pts + np.array([self.cx, self.cy])

    def paint(self, img, mask):
        ys, xs = np.nonzero(mask)
        img[ys, xs] = self.texture.sample(ys, xs, self.cx, self.cy, self.angle)

    def step(self):
        self.radius = float(np.clip(self.radius * math.exp(self.scale_step), self.min_r, self.max_r))
        if self.radius in (self.min_r, self.max_r):
            self.scale_step = -self.scale_step
        self.angle += self.rot_step
        self.cx += self.vx
        self.cy += self.vy
        margin = 1.5 * self.radius
        # bounce so the object stays fully inside the frame
        if not margin <= self.cx <= self.w - margin:
            self.vx = -self.vx
            self.cx = float(np.clip(self.cx, margin, self.w - margin))
        if not margin <= self.cy <= self.h - margin:
            self.vy = -self.vy
            self.cy = float(np.clip(self.cy, margin, self.h - margin))


def _rasterize(poly, h, w):
    mask = np.zeros((h, w), np.uint8)
    # 4 fractional bits, vertices at pixel-center convention
    pts = np.round((poly - 0.5) * 16).astype(np.int32)
    cv2.fillPoly(mask, [pts], 1, lineType=cv2.LINE_8, shift=4)
    return mask


def generate_sequence(spec: SyntheticSpec, index: int) -> Sequence:
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    bg = _background(rng, h, w, spec.background_noise)
    target = _MovingShape(rng, spec, h, w)
    distractors = [_MovingShape(rng, spec, h, w) for _ in range(spec.num_distractors)]
    frames, masks, boxes = [], [], []
    for t in range(spec.seq_length):
        if t:
            target.step()
            for d in distractors:
                d.step()
        img = bg + rng.normal(0, spec.background_noise * 0.25, size=bg.shape).astype(np.float32)
        for d in distractors:
            d.paint(img, _rasterize(d.polygon(t), h, w))
        mask = _rasterize(target.polygon(t), h, w)
        if not mask.any():
            # degenerate raster; fall back to the center pixel
            mask[int(np.clip(target.cy, 0, h - 1)), int(np.clip(target.cx, 0, w - 1))] = 1
        target.paint(img, mask)
        frames.append(np.clip(img, 0, 255).astype(np.uint8))
        masks.append(mask)
        boxes.append(mask_bounding_box(mask))
    return Sequence(f"seq{index:04d}", np.stack(frames), boxes, np.stack(masks))


def generate_synthetic_dataset(spec: SyntheticSpec) -> list:
    """Deterministic list of ``spec.num_sequences`` sequences."""
    return [generate_sequence(spec, i) for i in range(spec.num_sequences)]


def save_sequence(seq: Sequence, root) -> Path:
    d = Path(root) / seq.name
    (d / "img").mkdir(parents=True, exist_ok=True)
    write_groundtruth(d / "groundtruth.txt", seq.boxes)
    for i, frame in enumerate(seq.frames):
        cv2.imwrite(str(d / "img" / f"{i:05d}.png"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    if seq.masks is not None:
        (d / "mask").mkdir(exist_ok=True)
        for i, m in enumerate(seq.masks):
            cv2.imwrite(str(d / "mask" / f"{i:05d}.png"), (m > 0).astype(np.uint8) * 255)
    return d


def load_sequence(path) -> Sequence:
    d = Path(path)
    gt_path = d / "groundtruth.txt"
    if not gt_path.exists():
        raise FileNotFoundError(f"{gt_path} not found")
    boxes = read_groundtruth(gt_path)
    files = sorted((d / "img").glob("*.png")) or sorted((d / "img").glob("*.jpg"))
    if len(files) != len(boxes):
        raise ValueError(f"{d}: {len(files)} frames but {len(boxes)} ground-truth lines")
    frames = np.stack([cv2.cvtColor(cv2.imread(str(f), cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB) for f in files])
    masks = None
    mask_files = sorted((d / "mask").glob("*.png"))
    if mask_files:
        masks = np.stack([(cv2.imread(str(f), cv2.IMREAD_GRAYSCALE) > 127).astype(np.uint8) for f in mask_files])
    return Sequence(d.name, frames, boxes, masks)


def save_dataset(sequences, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for seq in sequences:
        save_sequence(seq, root)
    return root


def load_dataset(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    dirs = sorted(p for p in root.iterdir() if (p / "groundtruth.txt").exists())
    if not dirs:
        raise ValueError(f"{root}: no sequences found")
    return [load_sequence(p) for p in dirs]
