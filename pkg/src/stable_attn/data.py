"""Synthetic scenes: a target shape, same-intensity distractors, and optional
occluders painted above the target."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from .masks import read_mask_pgm, read_pgm, write_pgm
from .prompts import compose_occlusion, decode_rle, encode_rle
from .rng import Rng
from .shapes import random_shape

IMAGE_SIZE = 64
MIN_TARGET_PIXELS = 10
OBJECT_RANGE = (0.6, 0.95)
OCCLUDER_RANGE = (0.3, 0.45)
BACKGROUND_RANGE = (0.0, 0.2)
PIXEL_NOISE = 0.04


@dataclass
class SyntheticScene:
    image: np.ndarray  # H x W float in [0, 1], quantised to 1/255
    target_mask: np.ndarray  # full target extent
    visible_mask: np.ndarray  # training / evaluation label
    occluder_masks: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple:
        return self.image.shape


def _lerp(rng: Rng, lo_hi) -> float:
    lo, hi = lo_hi
    return lo + (hi - lo) * rng.uniform()


def make_scene(rng: Rng, occluded: bool, size: int = IMAGE_SIZE) -> SyntheticScene:
    while True:
        target, tmeta = random_shape(size, size, rng)
        if target.sum() >= 4 * MIN_TARGET_PIXELS:
            break
    keep_out = binary_dilation(target, iterations=3)
    distractors = []
    for _ in range(1 + rng.integers(2)):
        for _ in range(20):
            d, dmeta = random_shape(size, size, rng)
            if d.sum() >= MIN_TARGET_PIXELS and not (d & keep_out).any():
                distractors.append((d, dmeta))
                keep_out |= binary_dilation(d, iterations=3)
                break
    scene = compose_occlusion(target, 1 + rng.integers(2) if occluded else 0, rng,
                              min_visible=MIN_TARGET_PIXELS)

    img = np.full((size, size), _lerp(rng, BACKGROUND_RANGE))
    for d, _ in distractors:
        img[d] = _lerp(rng, OBJECT_RANGE)
    img[target] = _lerp(rng, OBJECT_RANGE)
    for occ in scene.occluders:
        img[occ] = _lerp(rng, OCCLUDER_RANGE)
    img = img + PIXEL_NOISE * rng.normal((size, size))
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    meta = {"target": tmeta, "distractors": [m for _, m in distractors], "occluders": scene.occluder_meta}
    return SyntheticScene(img, target, scene.visible_target, list(scene.occluders), meta)


def generate_dataset(n: int, occlusion_prob: float, rng: Rng) -> list[SyntheticScene]:
    """``n`` scenes; each gains 1-2 occluders with probability ``occlusion_prob``."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    return [make_scene(rng, rng.uniform() < occlusion_prob) for _ in range(n)]


def write_dataset(path: str | Path, scenes: list[SyntheticScene], provenance: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tag = " ".join(f"{k}={provenance[k]}" for k in sorted(provenance))
    for i, s in enumerate(scenes):
        write_pgm(path / f"scene_{i:04d}.pgm", s.image, tag)
        write_pgm(path / f"scene_{i:04d}.mask.pgm", s.visible_mask, tag)
        meta = dict(s.meta)
        meta["provenance"] = provenance
        meta["target_mask"] = encode_rle(s.target_mask)
        meta["occluder_masks"] = [encode_rle(m) for m in s.occluder_masks]
        (path / f"scene_{i:04d}.meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    manifest = {"n": len(scenes), "provenance": provenance}
    (path / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_dataset(path: str | Path) -> list[SyntheticScene]:
    path = Path(path)
    manifest = json.loads((path / "dataset.json").read_text())
    scenes = []
    for i in range(manifest["n"]):
        img = read_pgm(path / f"scene_{i:04d}.pgm").astype(np.float64) / 255.0
        label = read_mask_pgm(path / f"scene_{i:04d}.mask.pgm")
        meta = json.loads((path / f"scene_{i:04d}.meta.json").read_text())
        meta.pop("provenance", None)
        target = decode_rle(meta.pop("target_mask"))
        occ = [decode_rle(r) for r in meta.pop("occluder_masks")]
        scenes.append(SyntheticScene(img, target, label, occ, meta))
    return scenes
