import dataclasses
import math

import numpy as np
import pytest
import torch

from boxrefine.geometry import Box, CropSpec, crop_and_resize, make_search_region
from boxrefine.model import RefineNet, images_to_tensor
from boxrefine.refine import (
    BaseTracker,
    BoxRefiner,
    SimulatedTracker,
    SimulatedTrackerSpec,
    calibrate_translation_noise,
    coarse_mean_iou,
    initialize,
    mask_crop_to_image,
    mask_to_box,
)


class FixedOutputNet(RefineNet):
    """Predicts a fixed normalized ltrb regardless of input."""

    def __init__(self, config, ltrb):
        super().__init__(config)
        self.fixed = torch.tensor([ltrb], dtype=torch.float32)
        self.calls = 0

    def forward_from_reference(self, ref_feat, test, with_mask=None):
        self.calls += 1
        return {"ltrb": self.fixed.expand(test.shape[0], 4)}


def test_central_prediction_returns_coarse_box(tiny_config, tiny_sequences):
    seq = tiny_sequences[0]
    refiner = BoxRefiner(FixedOutputNet(tiny_config, [0.25, 0.25, 0.75, 0.75]))
    refiner.initialize(seq.frames[0], seq.boxes[0])
    coarse = Box(20.0, 30.0, 24.0, 12.0)
    out = refiner.refine(seq.frames[1], coarse)
    assert out.box.to_xywh() == pytest.approx(coarse.to_xywh(), abs=1e-6)


def test_prediction_maps_through_inverse_transform(tiny_config, tiny_sequences):
    seq = tiny_sequences[0]
    refiner = BoxRefiner(FixedOutputNet(tiny_config, [0.0, 0.5, 0.5, 1.0])).initialize(seq.frames[0], seq.boxes[0])
    coarse = Box(20.0, 30.0, 24.0, 12.0)
    # crop spans x in [8, 56], y in [24, 48]
    assert refiner.refine(seq.frames[1], coarse).box.to_ltrb() == pytest.approx((8, 36, 32, 48), abs=1e-6)


def test_refined_box_clamped_to_image(tiny_config, tiny_sequences):
    seq = tiny_sequences[0]
    refiner = BoxRefiner(FixedOutputNet(tiny_config, [0.0, 0.0, 1.0, 1.0])).initialize(seq.frames[0], seq.boxes[0])
    b = refiner.refine(seq.frames[1], Box(80.0, 80.0, 30.0, 30.0)).box
    assert b.right <= 96 and b.bottom <= 96


def test_reference_extracted_once(tiny_config, tiny_sequences, monkeypatch):
    seq = tiny_sequences[0]
    model = RefineNet(tiny_config)
    calls = []
    orig = model.extract_features
    monkeypatch.setattr(model, "extract_features", lambda x: calls.append(1) or orig(x))
    refiner = initialize(seq.frames[0], seq.boxes[0], model)
    ref = refiner.ref_feat.clone()
    for i in range(1, 4):
        refiner.refine(seq.frames[i], seq.boxes[i])
    assert refiner.reference_extractions == 1
    assert len(calls) == 1 + 3  # one reference, one test crop per frame
    assert torch.equal(ref, refiner.ref_feat)


def test_reference_crop_is_double_gt(tiny_config, tiny_sequences):
    seq = tiny_sequences[0]
    model = RefineNet(tiny_config).eval()
    refiner = BoxRefiner(model).initialize(seq.frames[0], seq.boxes[0])
    crop, _ = crop_and_resize(seq.frames[0], make_search_region(seq.boxes[0], 2.0, 64))
    with torch.no_grad():
        want, _ = model.extract_features(images_to_tensor(crop))
    assert torch.equal(refiner.ref_feat, want)


def test_mask_option(tiny_config, tiny_sequences):
    seq = tiny_sequences[0]
    cfg = dataclasses.replace(tiny_config, with_mask=True)
    model = RefineNet(cfg).eval()
    on = BoxRefiner(model, mask_enabled=True).initialize(seq.frames[0], seq.boxes[0])
    off = BoxRefiner(model, mask_enabled=False).initialize(seq.frames[0], seq.boxes[0])
    a, b = on.refine(seq.frames[2], seq.boxes[2]), off.refine(seq.frames[2], seq.boxes[2])
    assert a.box == b.box
    assert a.mask.shape == (96, 96) and b.mask is None
    with pytest.raises(ValueError, match="mask head"):
        BoxRefiner(RefineNet(tiny_config), mask_enabled=True)


def test_refine_before_initialize(tiny_config):
    with pytest.raises(RuntimeError):
        BoxRefiner(RefineNet(tiny_config)).refine(np.zeros((10, 10, 3)), Box(0, 0, 5, 5))


def test_mask_crop_to_image_inverts_crop():
    mask = np.zeros((60, 80), np.float32)
    mask[20:40, 30:50] = 1.0
    spec = CropSpec((40.0, 30.0), (40.0, 40.0), 40)  # scale 1 crop, offset (20, 10)
    crop, t = crop_and_resize(mask, spec, pad_value=0.0)
    back = mask_crop_to_image(crop, t, (60, 80))
    np.testing.assert_allclose(back[10:50, 20:60], mask[10:50, 20:60], atol=1e-6)
    assert back[:10].sum() == 0 and back[:, :20].sum() == 0


def test_mask_to_box():
    m = np.zeros((10, 10))
    m[3:6, 2:9] = 0.8
    assert mask_to_box(m).to_xywh() == (2.0, 3.0, 7.0, 3.0)
    with pytest.raises(ValueError):
        mask_to_box(m, threshold=0.9)


def test_exact_tracker_returns_gt(tiny_sequences):
    seq = tiny_sequences[0]
    trk = SimulatedTracker(SimulatedTrackerSpec(), seq.boxes)
    assert isinstance(trk, BaseTracker)
    trk.init(seq.frames[0], seq.boxes[0])
    assert [trk.track(f) for f in seq.frames[1:]] == seq.boxes[1:]
    with pytest.raises(IndexError):
        trk.track(seq.frames[0])


def test_tracker_noise_statistics():
    gt = [Box(400.0, 400.0, 100.0, 100.0)] * 4001
    frame = np.zeros((1000, 1000, 3), np.uint8)
    spec = SimulatedTrackerSpec(sigma_translation=0.1, sigma_log_scale=0.05, seed=4)
    trk = SimulatedTracker(spec, gt)
    trk.init(frame, gt[0])
    out = np.array([trk.track(frame).to_cxcywh() for _ in range(4000)])
    dx = (out[:, 0] - 450.0) / 100.0
    dlogw = np.log(out[:, 2] / 100.0)
    assert abs(dx.mean()) < 3 * 0.1 / math.sqrt(4000)
    assert dx.std() == pytest.approx(0.1, rel=0.05)
    assert dlogw.std() == pytest.approx(0.05, rel=0.05)


def test_tracker_streams_and_reinit(tiny_sequences):
    seq = tiny_sequences[0]
    spec = SimulatedTrackerSpec(sigma_translation=0.2, drift_rate=0.05, seed=1)

    def run(stream):
        trk = SimulatedTracker(spec, seq.boxes, stream)
        trk.init(seq.frames[0], seq.boxes[0])
        return [trk.track(f) for f in seq.frames[1:]]

    assert run(0) == run(0)
    assert run(0) != run(1)


def test_update_resets_state(tiny_sequences):
    seq = tiny_sequences[0]
    trk = SimulatedTracker(SimulatedTrackerSpec(drift_rate=0.3, seed=2), seq.boxes)
    trk.init(seq.frames[0], seq.boxes[0])
    for f in seq.frames[1:4]:
        trk.track(f)
    trk.update(seq.boxes[3])
    np.testing.assert_allclose(trk.state, 0.0, atol=1e-12)


def test_failures_displace():
    gt = [Box(400.0, 400.0, 100.0, 100.0)] * 101
    frame = np.zeros((1000, 1000, 3), np.uint8)
    trk = SimulatedTracker(SimulatedTrackerSpec(failure_prob=1.0, failure_displacement=2.0), gt)
    trk.init(frame, gt[0])
    for _ in range(100):
        cx, cy = trk.track(frame).center
        assert math.hypot(cx - 450, cy - 450) == pytest.approx(200.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        SimulatedTrackerSpec(sigma_translation=-0.1)
    with pytest.raises(ValueError):
        SimulatedTrackerSpec(failure_prob=1.5)


def test_calibration_hits_target(tiny_sequences):
    base = SimulatedTrackerSpec(seed=9)
    spec = calibrate_translation_noise(tiny_sequences, 0.6, base, sigma_log_scale_ratio=0.5)
    assert spec.seed == 9
    assert spec.sigma_log_scale == pytest.approx(0.5 * spec.sigma_translation)
    assert coarse_mean_iou(spec, tiny_sequences) == pytest.approx(0.6, abs=0.02)
    assert coarse_mean_iou(SimulatedTrackerSpec(), tiny_sequences) == 1.0
