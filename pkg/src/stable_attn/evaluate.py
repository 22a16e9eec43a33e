"""Stability evaluation: B prompts per image and condition, thresholded at
logit 0, scored against the label and against each other."""

from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .decoder import ModelConfig, predict
from .errors import ConfigError, GenerationError
from .metrics import DEFAULT_B, StabilityReport, aggregate_report, score_prompt_set
from .params import ParamGroup
from .prompts import Box, PromptSpec, noisy_box, sample_points
from .rng import Rng
from .train import embed_all

log = logging.getLogger(__name__)

DEFAULT_CONDITIONS = ("gt_box", "noisy_box:0.5-0.6", "points:1", "points:3")
THREADS_ENV = "STABLE_ATTN_THREADS"


@dataclass(frozen=True)
class Condition:
    kind: str
    iou_lo: float = 0.0
    iou_hi: float = 1.0
    k: int = 0

    @property
    def tag(self) -> str:
        if self.kind == "noisy_box":
            return f"noisy_box:{self.iou_lo:g}-{self.iou_hi:g}"
        if self.kind == "points":
            return f"points:{self.k}"
        return self.kind


def parse_condition(text: str) -> Condition:
    """``gt_box`` | ``noisy_box:LO-HI`` | ``points:K``."""
    kind, _, arg = text.strip().partition(":")
    try:
        if kind == "gt_box" and not arg:
            return Condition("gt_box")
        if kind == "noisy_box":
            lo, hi = (float(v) for v in (arg or "0.5-1.0").split("-"))
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError
            return Condition("noisy_box", lo, hi)
        if kind == "points":
            k = int(arg)
            if k < 1:
                raise ValueError
            return Condition("points", k=k)
    except ValueError:
        pass
    raise ConfigError(f"bad evaluation condition {text!r}")


def draw_prompt(cond: Condition, label: np.ndarray, rng: Rng, noise_scale: float) -> PromptSpec:
    gt = Box.from_mask(label)
    if cond.kind == "gt_box":
        return PromptSpec("gt_box", gt, cond.tag)
    if cond.kind == "noisy_box":
        H, W = label.shape
        return PromptSpec("noisy_box", noisy_box(gt, noise_scale, cond.iou_lo, cond.iou_hi, rng, W, H), cond.tag)
    return PromptSpec("points", sample_points(label, cond.k, rng), cond.tag)


@dataclass
class ModelVariant:
    name: str
    base: ParamGroup
    adapter: object = None


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def evaluate_stability(variant: ModelVariant, scenes, conditions, B: int = DEFAULT_B, seed: int = 0,
                       model_cfg: ModelConfig | None = None, noise_scale: float = 0.4,
                       provenance: dict | None = None, embeddings=None) -> StabilityReport:
    """Per image and condition draw ``B`` prompts, predict, and score mIoU,
    mBIoU and mSF. Prompt streams depend only on ``(seed, image, condition)``,
    so different variants see identical prompts."""
    model_cfg = model_cfg or ModelConfig()
    if B < 1:
        raise ConfigError("B must be >= 1")
    conds = [c if isinstance(c, Condition) else parse_condition(c) for c in conditions]
    embs = embeddings if embeddings is not None else embed_all(variant.base, scenes, model_cfg)

    def one(i: int, cond: Condition):
        label = scenes[i].visible_mask
        rng = Rng(seed).spawn(i, zlib.crc32(cond.tag.encode()))
        try:
            prompts = [draw_prompt(cond, label, rng, noise_scale) for _ in range(B)]
        except GenerationError:
            return None, []
        masks, alphas, cache = [], [], {}
        for p in prompts:
            key = repr(p.to_json())
            if key not in cache:
                out = predict(variant.base, embs[i], p, model_cfg, variant.adapter)
                cache[key] = (out.logits.data > 0.0, out.record.alphas)
            m, a = cache[key]
            masks.append(m)
            alphas.append(a)
        return score_prompt_set(masks, label), alphas

    results: dict[str, list] = {}
    extras: dict[str, float] = {}
    jobs = [(i, c) for c in conds for i in range(len(scenes))]
    with T.no_grad():
        if _worker_count() > 1:
            with ThreadPoolExecutor(_worker_count()) as pool:
                outs = list(pool.map(lambda job: one(*job), jobs))
        else:
            outs = [one(*job) for job in jobs]
    for (i, c), (score, alphas) in zip(jobs, outs):
        if score is None:
            extras[f"excluded:{c.tag}"] = extras.get(f"excluded:{c.tag}", 0) + 1
            continue
        results.setdefault(c.tag, []).append(score)
        for a_list in alphas:
            for l, a in enumerate(a_list):
                if a is not None:
                    key = f"alpha1:{c.tag}:layer{l}"
                    extras.setdefault(key, []).append(a[0])
    for tag in [c.tag for c in conds]:
        if tag not in results:
            raise GenerationError(f"no image produced feasible prompts for condition {tag}")
    for key in list(extras):
        if isinstance(extras[key], list):
            extras[key] = float(np.mean(extras[key]))
        if key.startswith("excluded:"):
            log.warning("%s: %d images excluded", key, extras[key])
    prov = {"seed": seed, "B": B, "variant": variant.name, "noise_scale": noise_scale}
    prov.update(provenance or {})
    report = aggregate_report(results, prov)
    report.extras = extras
    return report
