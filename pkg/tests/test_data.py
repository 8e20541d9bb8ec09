import numpy as np
import pytest

from boxrefine.data import (
    SyntheticSpec,
    generate_sequence,
    load_dataset,
    load_sequence,
    mask_bounding_box,
    save_dataset,
)


def test_generation_is_deterministic():
    spec = SyntheticSpec(num_sequences=2, seq_length=5, image_size=(64, 80), seed=3)
    a, b = generate_sequence(spec, 1), generate_sequence(spec, 1)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.boxes == b.boxes
    c = generate_sequence(spec, 0)
    assert not np.array_equal(a.frames, c.frames)


def test_sequence_invariants(tiny_sequences):
    for seq in tiny_sequences:
        n = len(seq)
        assert seq.frames.shape == (n, 96, 96, 3) and seq.frames.dtype == np.uint8
        assert seq.masks.shape == (n, 96, 96)
        for box, mask in zip(seq.boxes, seq.masks):
            assert box == mask_bounding_box(mask)
            assert box.x >= 0 and box.y >= 0 and box.right <= 96 and box.bottom <= 96


def test_object_moves(tiny_sequences):
    moved = [seq.boxes[0] != seq.boxes[-1] for seq in tiny_sequences]
    assert any(moved)


def test_mask_bounding_box_inclusive():
    m = np.zeros((10, 10), np.uint8)
    m[2:5, 3:4] = 1
    assert mask_bounding_box(m).to_xywh() == (3.0, 2.0, 1.0, 3.0)
    with pytest.raises(ValueError):
        mask_bounding_box(np.zeros((3, 3)))


def test_disk_round_trip(tmp_path, tiny_sequences):
    save_dataset(tiny_sequences[:2], tmp_path)
    loaded = load_dataset(tmp_path)
    assert [s.name for s in loaded] == [s.name for s in tiny_sequences[:2]]
    for a, b in zip(loaded, tiny_sequences):
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.masks, b.masks)
        assert a.boxes == b.boxes


def test_load_errors(tmp_path, tiny_sequences):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
    d = save_dataset(tiny_sequences[:1], tmp_path) / tiny_sequences[0].name
    (d / "groundtruth.txt").write_text("1,2,3,4\n")
    with pytest.raises(ValueError, match="ground-truth lines"):
        load_sequence(d)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(object_kinds=("star",))
    with pytest.raises(ValueError):
        SyntheticSpec(seq_length=0)
