import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxrefine.geometry import (
    Box,
    CropSpec,
    CropTransform,
    JitterParams,
    box_crop_to_image,
    box_image_to_crop,
    crop_and_resize,
    iou,
    iou_many,
    jitter_crop_spec,
    make_search_region,
    read_groundtruth,
    write_groundtruth,
)
from oracles import crop_loops, iou_loops

coord = st.floats(-500, 500, allow_nan=False)
size = st.floats(0.5, 400, allow_nan=False)
boxes = st.builds(Box, coord, coord, size, size)


def random_box(rng, lo=-100, hi=400):
    return Box(*rng.uniform(lo, hi, 2), *rng.uniform(1, 200, 2))


def test_box_validation():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 5)
    with pytest.raises(ValueError):
        Box(0, 0, 5, -1)
    with pytest.raises(ValueError):
        Box(float("nan"), 0, 5, 5)


@given(boxes)
def test_box_conversions_round_trip(b):
    assert Box.from_ltrb(*b.to_ltrb()).to_xywh() == pytest.approx(b.to_xywh(), abs=1e-9)
    cx, cy, w, h = b.to_cxcywh()
    r = Box.from_center(cx, cy, w, h)
    assert r.to_xywh() == pytest.approx(b.to_xywh(), abs=1e-9)


@given(boxes, st.floats(10, 500), st.floats(10, 500))
def test_clamp_stays_inside(b, w, h):
    c = b.clamp(w, h, 1.0)
    assert 0 <= c.x and 0 <= c.y
    assert c.right <= w + 1e-9 and c.bottom <= h + 1e-9
    assert c.w >= 1.0 - 1e-9 and c.h >= 1.0 - 1e-9


def test_clamp_inside_is_identity():
    b = Box(1.25, 2.5, 10.1, 3.3)
    assert b.clamp(100, 100) is b


@settings(max_examples=200)
@given(boxes, boxes)
def test_iou_matches_loop_oracle(a, b):
    assert iou(a, b) == pytest.approx(iou_loops(a.to_xywh(), b.to_xywh()), abs=1e-12)
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert 0.0 <= iou(a, b) <= 1.0


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 0, 10, 10)) == pytest.approx(50 / 150)
    assert iou(a, Box(10, 0, 10, 10)) == 0.0
    arr = iou_many(np.array([[0, 0, 10, 10], [0, 0, 10, 10]]), np.array([[0, 0, 10, 10], [5, 0, 10, 10]]))
    np.testing.assert_allclose(arr, [1.0, 1 / 3])


def test_crop_transform_round_trip_1000_cases(rng):
    worst = 0.0
    for _ in range(1000):
        b = random_box(rng)
        spec = CropSpec(tuple(rng.uniform(-50, 400, 2)), tuple(rng.uniform(1, 300, 2)), int(rng.integers(16, 300)))
        t = CropTransform.from_spec(spec)
        back = box_crop_to_image(box_image_to_crop(b, t), t)
        worst = max(worst, max(abs(p - q) for p, q in zip(back.to_ltrb(), b.to_ltrb())))
        x, y = rng.uniform(-100, 500, 2)
        u, v = t.forward(x, y)
        xx, yy = t.inverse(u, v)
        worst = max(worst, abs(xx - x), abs(yy - y))
    assert worst < 1e-6


def test_search_region_maps_box_to_central_half():
    b = Box(30, 40, 20, 10)
    spec = make_search_region(b, 2.0, 256)
    assert spec.size == (20, 40)
    assert spec.center == b.center
    cb = box_image_to_crop(b, CropTransform.from_spec(spec))
    assert cb.to_ltrb() == pytest.approx((64, 64, 192, 192))


def test_crop_matches_bilinear_oracle(rng):
    img = rng.uniform(0, 255, (13, 17, 3)).astype(np.float32)
    for _ in range(5):
        center = tuple(rng.uniform(-3, 20, 2))
        size_hw = tuple(rng.uniform(2, 25, 2))
        out_size = int(rng.integers(4, 12))
        crop, _ = crop_and_resize(img, CropSpec(center, size_hw, out_size), pad_value=(7.0, 8.0, 9.0))
        want = crop_loops(img.astype(np.float64), center, size_hw, out_size, np.array([7.0, 8.0, 9.0]))
        # cv2 quantizes bilinear weights to 1/32 and uses float32
        np.testing.assert_allclose(crop, want, atol=255 / 32 + 1e-3)
        assert np.abs(crop - want).mean() < 2.0


def test_identity_crop_reproduces_frame(rng):
    img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
    crop, t = crop_and_resize(img, CropSpec((8.0, 8.0), (16.0, 16.0), 16))
    np.testing.assert_array_equal(crop, img.astype(np.float32))
    assert t == CropTransform.identity()


def test_crop_default_pad_is_channel_mean():
    img = np.zeros((10, 10, 3), np.uint8)
    img[..., 0] = 100
    img[..., 2] = 50
    crop, _ = crop_and_resize(img, CropSpec((-100.0, -100.0), (10.0, 10.0), 4))
    np.testing.assert_allclose(crop[0, 0], [100, 0, 50])


def test_zero_noise_jitter_is_deterministic(rng):
    for _ in range(50):
        b = random_box(rng)
        spec = jitter_crop_spec(b, JitterParams(0.0, 0.0), rng, 128)
        ref = make_search_region(b, 2.0, 128)
        assert spec.center == pytest.approx(ref.center, abs=1e-12)
        assert spec.size == pytest.approx(ref.size, abs=1e-12)


def test_jitter_seeded_reproducible():
    b = Box(10, 20, 30, 40)
    a = jitter_crop_spec(b, JitterParams(), np.random.default_rng(5))
    c = jitter_crop_spec(b, JitterParams(), np.random.default_rng(5))
    assert a == c


def test_jitter_monte_carlo_moments():
    """Distribution of size and center under the sampler, 3 standard errors."""
    n = 10_000
    params = JitterParams(f_s=0.3, f_c=0.4)
    b = Box(50, 60, 40, 20)
    rng = np.random.default_rng(2024)
    log_h, log_w, ux, uy = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    for i in range(n):
        s = jitter_crop_spec(b, params, rng)
        h, w = s.size
        log_h[i] = math.log(h / (2 * b.h))
        log_w[i] = math.log(w / (2 * b.w))
        o_max = math.sqrt(h * w) * params.f_c
        ux[i] = (s.center[0] - b.center[0]) / o_max + 0.5
        uy[i] = (s.center[1] - b.center[1]) / o_max + 0.5
    fs2 = params.f_s ** 2
    for x in (log_h, log_w):
        assert abs(x.mean()) < 3 * math.sqrt(fs2 / n)
        assert abs(x.var(ddof=1) - fs2) < 3 * fs2 * math.sqrt(2 / (n - 1))
    for u in (ux, uy):
        assert u.min() >= 0 and u.max() <= 1
        assert abs(u.mean() - 0.5) < 3 * math.sqrt(1 / 12 / n)
        assert abs(u.var(ddof=1) - 1 / 12) < 3 * math.sqrt((1 / 80 - 1 / 144) / n)


def test_groundtruth_round_trip(tmp_path):
    bs = [Box(1.5, 2.25, 3.0, 4.125), Box(0.1, 0.2, 0.3, 0.4)]
    write_groundtruth(tmp_path / "gt.txt", bs)
    assert read_groundtruth(tmp_path / "gt.txt") == bs


def test_groundtruth_malformed_line_names_file_and_line(tmp_path):
    p = tmp_path / "gt.txt"
    p.write_text("1,2,3,4\n1,2,x,4\n")
    with pytest.raises(ValueError, match=r"gt\.txt:2: malformed"):
        read_groundtruth(p)
    p.write_text("1,2,3\n")
    with pytest.raises(ValueError, match=":1:"):
        read_groundtruth(p)


def test_crop_spec_validation():
    with pytest.raises(ValueError):
        CropSpec((0, 0), (0, 5))
    with pytest.raises(ValueError):
        make_search_region(Box(0, 0, 1, 1), 0.0)
    with pytest.raises(ValueError):
        JitterParams(-0.1, 0.1)
