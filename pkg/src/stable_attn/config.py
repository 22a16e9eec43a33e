"""Run configuration with strict key checking and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    seed: int = 1
    n_train: int = 200
    n_test: int = 50
    occlusion_prob: float = 0.3
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 8
    base_epochs: int = 30
    adapt_epochs: int = 10
    base_point_count: int = 3
    # stage-2 prompt mix: relative weights per prompt kind
    prompt_mix: dict = field(default_factory=lambda: {
        "gt_box": 1.0, "noisy_box": 1.0, "points": 1.0, "coarse_mask": 1.0})
    noise_scale: float = 0.4
    iou_lo: float = 0.5
    iou_hi: float = 1.0
    point_counts: list = field(default_factory=lambda: [1, 3, 10])
    coarse_band: int = 2
    coarse_flip: float = 0.5
    s_p: float = 0.25
    ce_w: float = 1.0
    dice_w: float = 1.0

    def __post_init__(self):
        if self.weight_decay != 0.0:
            raise ConfigError("weight decay is fixed at 0")
        if self.s_p <= 0:
            raise ConfigError("s_p must be positive")
        if not 0.0 <= self.iou_lo < self.iou_hi <= 1.0:
            raise ConfigError(f"bad IoU window [{self.iou_lo}, {self.iou_hi}]")
        if not self.point_counts or min(self.point_counts) < 1:
            raise ConfigError("point_counts must be positive integers")
        unknown = set(self.prompt_mix) - {"gt_box", "noisy_box", "points", "coarse_mask"}
        if unknown or sum(self.prompt_mix.values()) <= 0:
            raise ConfigError(f"bad prompt mix {self.prompt_mix}")
        if self.batch_size < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigError("sizes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_run_config(text: str) -> tuple[TrainConfig, dict]:
    """Parse a run-config JSON document: ``{"schema_version": 1, "train": {...},
    "paths": {...}}``. Unknown keys anywhere are rejected."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - {"schema_version", "train", "paths"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc.get('schema_version')}")
    paths = doc.get("paths", {})
    bad_paths = set(paths) - {"data", "base", "checkpoint", "out"}
    if bad_paths:
        raise ConfigError(f"unknown path keys: {sorted(bad_paths)}")
    try:
        cfg = TrainConfig.from_dict(doc.get("train", {}))
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg, paths


def default_run_config() -> dict:
    return {"schema_version": SCHEMA_VERSION, "train": TrainConfig().to_dict(), "paths": {}}
