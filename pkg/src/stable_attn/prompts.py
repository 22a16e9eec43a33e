"""Prompt generators of controlled quality and the occlusion compositor."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import GenerationError
from .masks import as_mask, bbox, boundary_band
from .rng import Rng
from .shapes import random_shape

PROMPT_KINDS = ("gt_box", "noisy_box", "points", "coarse_mask")
MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_mask(cls, mask) -> "Box":
        return cls(*bbox(as_mask(mask)))


@dataclass(frozen=True)
class PointSet:
    """Positive clicks as an ``(k, 2)`` array of ``(x, y)`` pixel centres."""

    points: np.ndarray

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("a point set needs at least one point")

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        return isinstance(other, PointSet) and np.array_equal(self.points, other.points)

    __hash__ = None


Payload = Union[Box, PointSet, np.ndarray]


@dataclass
class PromptSpec:
    kind: str
    payload: Payload
    quality_tag: str = ""
    # coarse-mask prompts are fed together with a box
    companion_box: Box | None = None

    def __post_init__(self):
        expected = {"gt_box": Box, "noisy_box": Box, "points": PointSet, "coarse_mask": np.ndarray}
        if self.kind not in expected:
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if not isinstance(self.payload, expected[self.kind]):
            raise TypeError(f"{self.kind} prompt needs a {expected[self.kind].__name__} payload")

    def to_json(self) -> dict:
        d = {"kind": self.kind, "quality_tag": self.quality_tag}
        if isinstance(self.payload, Box):
            d["box"] = self.payload.as_list()
        elif isinstance(self.payload, PointSet):
            d["points"] = self.payload.points.tolist()
        else:
            d["mask"] = encode_rle(self.payload)
        if self.companion_box is not None:
            d["companion_box"] = self.companion_box.as_list()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PromptSpec":
        kind = d["kind"]
        if "box" in d:
            payload = Box(*d["box"])
        elif "points" in d:
            payload = PointSet(np.asarray(d["points"], dtype=np.float64).reshape(-1, 2))
        else:
            payload = decode_rle(d["mask"])
        comp = Box(*d["companion_box"]) if d.get("companion_box") else None
        return cls(kind, payload, d.get("quality_tag", ""), comp)


def encode_rle(mask: np.ndarray) -> dict:
    """Row-major run lengths, alternating background/foreground, starting with background."""
    flat = as_mask(mask).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return {"height": mask.shape[0], "width": mask.shape[1], "runs": runs}


def decode_rle(d: dict) -> np.ndarray:
    vals = np.arange(len(d["runs"])) % 2 == 1
    return np.repeat(vals, d["runs"]).reshape(d["height"], d["width"])


def write_prompts_jsonl(path: str | Path, prompts: Iterable[PromptSpec]) -> None:
    with open(path, "w") as fh:
        for p in prompts:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def read_prompts_jsonl(path: str | Path) -> list[PromptSpec]:
    with open(path) as fh:
        return [PromptSpec.from_json(json.loads(line)) for line in fh if line.strip()]


# generators ------------------------------------------------------------------

def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def noisy_box(gt: Box, noise_scale: float, iou_lo: float, iou_hi: float, rng: Rng,
              width: float, height: float) -> Box:
    """Jitter each corner with Gaussian noise (sigma = noise_scale * side / 2),
    clamp to the image, and resample until the IoU with ``gt`` lands in
    ``[iou_lo, iou_hi]``."""
    if not 0.0 <= iou_lo <= iou_hi <= 1.0:
        raise ValueError(f"bad IoU window [{iou_lo}, {iou_hi}]")
    sx = noise_scale * (gt.x1 - gt.x0) / 2.0
    sy = noise_scale * (gt.y1 - gt.y0) / 2.0
    scale = np.array([sx, sy, sx, sy])
    base = np.array(gt.as_list())
    hi = np.array([width, height, width, height])
    for _ in range(MAX_REJECTIONS):
        c = np.clip(base + scale * rng.normal(4), 0.0, hi)
        if c[0] >= c[2] or c[1] >= c[3]:
            continue
        cand = Box(*(float(v) for v in c))
        if iou_lo <= box_iou(cand, gt) <= iou_hi:
            return cand
    raise GenerationError(
        f"no box with IoU in [{iou_lo}, {iou_hi}] after {MAX_REJECTIONS} draws around {gt.as_list()}")


def sample_points(mask, k: int, rng: Rng) -> PointSet:
    """``k`` distinct foreground pixel centres, uniformly without replacement."""
    ys, xs = np.nonzero(as_mask(mask))
    if k < 1 or len(xs) < k:
        raise GenerationError(f"cannot draw {k} points from {len(xs)} foreground pixels")
    pick = rng.choice(len(xs), k)
    return PointSet(np.stack([xs[pick] + 0.5, ys[pick] + 0.5], axis=1).astype(np.float64))


def coarse_mask(gt, band_radius: int, flip_prob: float, rng: Rng) -> np.ndarray:
    """Flip each pixel of the boundary band independently with ``flip_prob``."""
    if band_radius < 1 or not 0.0 <= flip_prob <= 1.0:
        raise ValueError("band_radius must be >= 1 and flip_prob in [0, 1]")
    gt = as_mask(gt)
    band = boundary_band(gt, band_radius)
    flips = rng.uniform(gt.shape) < flip_prob
    return gt ^ (band & flips)


@dataclass
class OcclusionScene:
    target_mask: np.ndarray
    occluders: list = field(default_factory=list)
    visible_target: np.ndarray | None = None
    occluder_meta: list = field(default_factory=list)

    @property
    def shape(self) -> tuple:
        return self.target_mask.shape


def compose_occlusion(target, n_occluders: int, rng: Rng, min_visible: int = 10,
                      max_tries: int = 50) -> OcclusionScene:
    """Paint ``n_occluders`` random shapes above ``target``. Each occluder is
    centred on a target pixel; draws that would leave fewer than
    ``min_visible`` target pixels are redrawn."""
    target = as_mask(target)
    H, W = target.shape
    visible = target.copy()
    scene = OcclusionScene(target_mask=target)
    ys, xs = np.nonzero(target)
    ext = max(np.ptp(xs) + 1, np.ptp(ys) + 1) if len(xs) else 4
    for _ in range(n_occluders):
        for _ in range(max_tries):
            i = rng.integers(len(xs))
            size = (0.2 * ext, 0.45 * ext)
            occ, meta = random_shape(H, W, rng, center=(xs[i] + 0.5, ys[i] + 0.5),
                                     size_range=(max(2.0, size[0]), max(3.0, size[1])))
            if (visible & ~occ).sum() >= min_visible:
                break
        else:
            raise GenerationError(f"could not place an occluder leaving {min_visible} visible pixels")
        visible &= ~occ
        scene.occluders.append(occ)
        scene.occluder_meta.append(meta)
    scene.visible_target = visible
    return scene
