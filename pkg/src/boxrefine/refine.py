"""Plug-and-play box refinement over any base tracker.

A base tracker only needs ``init(frame, box)`` and ``track(frame) -> Box``,
called in frame order. Trackers that also define ``update(box)`` can take
the refined box back as their state ("feedback" mode).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

import cv2
import numpy as np
import torch

from .geometry import Box, CropTransform, box_crop_to_image, crop_and_resize, iou, make_search_region
from .model import HeadOutput, RefineNet, images_to_tensor, to_head_output


@runtime_checkable
class BaseTracker(Protocol):
    def init(self, frame: np.ndarray, box: Box) -> None: ...

    def track(self, frame: np.ndarray) -> Box: ...


@dataclass
class RefineResult:
    box: Box
    mask: Optional[np.ndarray] = None
    head: Optional[HeadOutput] = None


class BoxRefiner:
    """Per-sequence refinement state: frame-1 reference features plus the model.

    The reference is extracted once in ``initialize`` and never updated.
    One instance serves one sequence; do not share it across threads.
    """

    def __init__(self, model: RefineNet, crop_factor: float = 2.0, mask_enabled: bool = False,
                 mask_threshold: float = 0.5):
        if mask_enabled and model.mask_head is None:
            raise ValueError("mask_enabled requires a model with a mask head")
        self.model = model.eval()
        self.crop_factor = crop_factor
        self.mask_enabled = mask_enabled
        self.mask_threshold = mask_threshold
        self.ref_feat = None
        self.reference_extractions = 0

    @property
    def input_size(self) -> int:
        return self.model.config.input_size

    def _to_tensor(self, crop):
        dtype = next(self.model.parameters()).dtype
        return images_to_tensor(crop, dtype)

    @torch.no_grad()
    def initialize(self, frame: np.ndarray, gt: Box) -> "BoxRefiner":
        crop, _ = crop_and_resize(frame, make_search_region(gt, 2.0, self.input_size))
        self.ref_feat, _ = self.model.extract_features(self._to_tensor(crop))
        self.reference_extractions += 1
        return self

    @torch.no_grad()
    def refine(self, frame: np.ndarray, coarse: Box) -> RefineResult:
        if self.ref_feat is None:
            raise RuntimeError("refine called before initialize")
        if not (coarse.w > 0 and coarse.h > 0):
            raise ValueError(f"degenerate coarse box {coarse}")
        spec = make_search_region(coarse, self.crop_factor, self.input_size)
        crop, t = crop_and_resize(frame, spec)
        out = self.model.forward_from_reference(self.ref_feat, self._to_tensor(crop), with_mask=self.mask_enabled)
        head = to_head_output(out, self.model.config)
        h, w = frame.shape[:2]
        box = box_crop_to_image(head.box_crop, t).clamp(w, h, 1.0)
        mask = None
        if head.mask is not None:
            mask = mask_crop_to_image(head.mask, t, (h, w))
        return RefineResult(box, mask, head)


def initialize(frame: np.ndarray, gt: Box, model: RefineNet, **kwargs) -> BoxRefiner:
    return BoxRefiner(model, **kwargs).initialize(frame, gt)


def mask_crop_to_image(mask: np.ndarray, t: CropTransform, image_hw) -> np.ndarray:
    """Resample a crop-space probability map to image space (zero outside the crop)."""
    h, w = image_hw
    sx, sy = t.scale
    ox, oy = t.offset
    # image pixel index -> crop pixel index
    m = np.array([[sx, 0.0, (0.5 - ox) * sx - 0.5],
                  [0.0, sy, (0.5 - oy) * sy - 0.5]])
    return cv2.warpAffine(mask.astype(np.float32), m, (w, h), flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)


def mask_to_box(mask: np.ndarray, threshold: float = 0.5) -> Box:
    """Bounding rectangle (inclusive pixel extents) of pixels >= ``threshold``."""
    on = np.asarray(mask) >= threshold
    rows = np.flatnonzero(on.any(axis=1))
    if rows.size == 0:
        raise ValueError("empty mask")
    cols = np.flatnonzero(on.any(axis=0))
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1))


@dataclass
class SimulatedTrackerSpec:
    """Noise model of a simulated base tracker.

    Translation noise and drift are in units of ``sqrt(w * h)`` of the GT box.
    """

    sigma_translation: float = 0.0
    sigma_log_scale: float = 0.0
    drift_rate: float = 0.0
    failure_prob: float = 0.0
    failure_displacement: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_translation", "sigma_log_scale", "drift_rate", "failure_prob", "failure_displacement"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.failure_prob > 1:
            raise ValueError("failure_prob must be <= 1")

    @property
    def is_exact(self) -> bool:
        return self.sigma_translation == self.sigma_log_scale == self.drift_rate == self.failure_prob == 0


class SimulatedTracker:
    """Emits the ground truth corrupted by noise, random-walk drift and failures.

    The drift state ``(dx, dy, dlog_w, dlog_h)`` relative to the GT persists
    across frames; ``update`` resets it to the deviation of a supplied box.
    """

    def __init__(self, spec: SimulatedTrackerSpec, gt_boxes, stream: int = 0):
        self.spec = spec
        self.gt = list(gt_boxes)
        self.stream = stream
        self._reset()

    def _reset(self):
        self.rng = np.random.default_rng([self.spec.seed, self.stream])
        self.state = np.zeros(4)
        self.index = 0
        self.frame_hw = None

    def init(self, frame, box):
        self._reset()
        self.frame_hw = frame.shape[:2]

    def track(self, frame) -> Box:
        self.index += 1
        if self.index >= len(self.gt):
            raise IndexError("tracked past the end of the ground truth")
        gt = self.gt[self.index]
        if self.spec.is_exact:
            return gt
        s = self.spec
        rng = self.rng
        size = math.sqrt(gt.w * gt.h)
        self.state[:2] += rng.normal(0, s.drift_rate, 2) if s.drift_rate else 0.0
        self.state[2:] += rng.normal(0, s.drift_rate, 2) * 0.5 if s.drift_rate else 0.0
        dev = self.state.copy()
        dev[:2] += rng.normal(0, 1, 2) * s.sigma_translation
        dev[2:] += rng.normal(0, 1, 2) * s.sigma_log_scale
        if s.failure_prob and rng.random() < s.failure_prob:
            a = rng.uniform(0, 2 * math.pi)
            dev[:2] += s.failure_displacement * np.array([math.cos(a), math.sin(a)])
        cx, cy = gt.center
        box = Box.from_center(cx + dev[0] * size, cy + dev[1] * size, gt.w * math.exp(dev[2]), gt.h * math.exp(dev[3]))
        h, w = frame.shape[:2]
        return box.clamp(w, h, 1.0)

    def update(self, box: Box) -> None:
        gt = self.gt[self.index]
        size = math.sqrt(gt.w * gt.h)
        (cx, cy), (gx, gy) = box.center, gt.center
        self.state = np.array([(cx - gx) / size, (cy - gy) / size, math.log(box.w / gt.w), math.log(box.h / gt.h)])


def simulated_tracker(spec: SimulatedTrackerSpec, gt_boxes, stream: int = 0) -> SimulatedTracker:
    return SimulatedTracker(spec, gt_boxes, stream)


def coarse_mean_iou(spec: SimulatedTrackerSpec, sequences) -> float:
    """Mean IoU against GT of the tracker's outputs over frames 2..N."""
    vals = []
    for k, seq in enumerate(sequences):
        trk = SimulatedTracker(spec, seq.boxes, stream=k)
        trk.init(seq.frames[0], seq.boxes[0])
        vals.extend(iou(trk.track(seq.frames[i]), seq.boxes[i]) for i in range(1, len(seq)))
    return float(np.mean(vals))


def calibrate_translation_noise(sequences, target_iou: float, base: SimulatedTrackerSpec = SimulatedTrackerSpec(),
                                sigma_log_scale_ratio: float = 1.0, iters: int = 30) -> SimulatedTrackerSpec:
    """Bisect ``sigma_translation`` (with ``sigma_log_scale = ratio * sigma``) to hit ``target_iou``.

    Drift, failure and seed settings are taken from ``base``.
    """
    def with_sigma(sigma):
        return dataclasses.replace(base, sigma_translation=sigma, sigma_log_scale=sigma * sigma_log_scale_ratio)

    lo, hi = 0.0, 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if coarse_mean_iou(with_sigma(mid), sequences) > target_iou:
            lo = mid
        else:
            hi = mid
    return with_sigma(0.5 * (lo + hi))
