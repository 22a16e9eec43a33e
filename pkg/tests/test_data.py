import hashlib
import json

import numpy as np
import pytest

from stable_attn.data import generate_dataset, read_dataset, write_dataset
from stable_attn.masks import read_pgm
from stable_attn.rng import Rng


def _digest(directory):
    h = hashlib.sha256()
    for f in sorted(directory.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_same_seed_bit_identical():
    a = generate_dataset(6, 0.5, Rng(3))
    b = generate_dataset(6, 0.5, Rng(3))
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.visible_mask, sb.visible_mask)
        assert sa.meta == sb.meta
    c = generate_dataset(6, 0.5, Rng(4))
    assert not all(np.array_equal(x.image, y.image) for x, y in zip(a, c))


def test_no_occluders_when_probability_zero():
    scenes = generate_dataset(20, 0.0, Rng(0))
    assert all(not s.occluder_masks for s in scenes)
    assert all(np.array_equal(s.target_mask, s.visible_mask) for s in scenes)


def test_targets_have_enough_pixels_and_visible_subset():
    scenes = generate_dataset(30, 1.0, Rng(1))
    for s in scenes:
        assert s.visible_mask.sum() >= 10
        assert not (s.visible_mask & ~s.target_mask).any()
        for occ in s.occluder_masks:
            assert not (occ & s.visible_mask).any()
    assert any(s.occluder_masks for s in scenes)


def test_image_range_and_quantisation():
    s = generate_dataset(1, 0.0, Rng(2))[0]
    assert s.image.shape == (64, 64)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert np.allclose(s.image * 255, np.rint(s.image * 255))


def test_occlusion_fraction_roughly_matches():
    scenes = generate_dataset(200, 0.3, Rng(5))
    frac = np.mean([bool(s.occluder_masks) for s in scenes])
    assert 0.2 < frac < 0.4


def test_write_read_round_trip(tmp_path):
    scenes = generate_dataset(4, 0.5, Rng(6))
    d = write_dataset(tmp_path / "ds", scenes, {"seed": 6, "config_hash": "abc"})
    names = sorted(p.name for p in d.iterdir())
    assert "scene_0000.pgm" in names and "scene_0003.mask.pgm" in names and "scene_0002.meta.json" in names
    index = json.loads((d / "dataset.json").read_text())
    assert index["provenance"]["config_hash"] == "abc"
    back = read_dataset(d)
    assert len(back) == 4
    for a, b in zip(scenes, back):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.visible_mask, b.visible_mask)
        assert np.array_equal(a.target_mask, b.target_mask)
        assert len(a.occluder_masks) == len(b.occluder_masks)
    img = read_pgm(d / "scene_0000.pgm")
    assert img.dtype == np.uint8 and img.shape == (64, 64)


def test_dataset_directories_byte_identical(tmp_path):
    a = write_dataset(tmp_path / "a", generate_dataset(5, 0.5, Rng(7)), {"seed": 7})
    b = write_dataset(tmp_path / "b", generate_dataset(5, 0.5, Rng(7)), {"seed": 7})
    assert _digest(a) == _digest(b)


def test_bad_size():
    with pytest.raises(ValueError):
        generate_dataset(0, 0.3, Rng(0))
