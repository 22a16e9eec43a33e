"""Mask IoU, boundary IoU, and the segmentation-stability score."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError
from .masks import as_mask, check_same_shape, inner_band

DEFAULT_B = 20


def mask_iou(a, b) -> float:
    """Pixel IoU; two empty masks agree perfectly (1.0)."""
    a, b = as_mask(a), as_mask(b)
    check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def default_boundary_width(height: int, width: int) -> int:
    return max(1, round(0.02 * math.hypot(height, width)))


def boundary_iou(pred, gt, d: int | None = None) -> float:
    """IoU of the inner contour bands of width ``d`` of both masks."""
    pred, gt = as_mask(pred), as_mask(gt)
    check_same_shape(pred, gt)
    if d is None:
        d = default_boundary_width(*gt.shape)
    if d < 1:
        raise ValueError(f"boundary width must be >= 1, got {d}")
    return mask_iou(inner_band(pred, d), inner_band(gt, d))


def stability_score(masks: Sequence) -> float:
    """Mean IoU of every mask against the union of all masks."""
    if len(masks) == 0:
        raise ContractError("stability_score needs at least one mask")
    stack = np.stack([as_mask(m) for m in masks])
    union = stack.any(axis=0)
    u = np.count_nonzero(union)
    if u == 0:
        return 1.0
    # each mask is a subset of the union, so IoU = |M_i| / |union|
    return float(stack.reshape(len(stack), -1).sum(axis=1).mean() / u)


@dataclass
class ConditionScores:
    miou: float
    mbiou: float
    msf: float
    n: int


@dataclass
class StabilityReport:
    per_condition: dict[str, ConditionScores]
    provenance: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float, int]]:
        out = []
        for cond, s in self.per_condition.items():
            out += [(cond, "mIoU", s.miou, s.n), (cond, "mBIoU", s.mbiou, s.n), (cond, "mSF", s.msf, s.n)]
        return out

    def to_json(self) -> dict:
        return {
            "per_condition": {c: vars(s) for c, s in self.per_condition.items()},
            "provenance": self.provenance,
            "extras": self.extras,
        }

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and its JSON mirror ``<stem>.json``."""
        stem = Path(stem)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "metric", "value", "n"])
            for cond, metric, value, n in self.rows():
                w.writerow([cond, metric, repr(float(value)), n])
            for key, value in sorted(self.extras.items()):
                if isinstance(value, (int, float)):
                    w.writerow(["_extra", key, repr(value), ""])
        json_path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return csv_path, json_path


def aggregate_report(results: Mapping[str, Sequence[Mapping[str, float]]],
                     provenance: dict | None = None) -> StabilityReport:
    """Unweighted mean over images of per-image ``miou``/``mbiou``/``msf``."""
    per = {}
    for cond, items in results.items():
        if not items:
            raise ContractError(f"condition {cond!r} has no scored images")
        per[cond] = ConditionScores(
            miou=float(np.mean([r["miou"] for r in items])),
            mbiou=float(np.mean([r["mbiou"] for r in items])),
            msf=float(np.mean([r["msf"] for r in items])),
            n=len(items),
        )
    return StabilityReport(per, dict(provenance or {}))


def score_prompt_set(pred_masks: Sequence, gt) -> dict[str, float]:
    """Per-image scores for ``B`` predictions of one target."""
    gt = as_mask(gt)
    return {
        "miou": float(np.mean([mask_iou(m, gt) for m in pred_masks])),
        "mbiou": float(np.mean([boundary_iou(m, gt) for m in pred_masks])),
        "msf": stability_score(pred_masks),
    }
