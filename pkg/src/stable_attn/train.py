"""Losses and the two training stages.

Stage 1 trains encoder and decoder together on clean prompts (tight boxes and
three clicks) and freezes the result. Stage 2 trains only the plugin weights
on a mix of clean, noisy, sparse and coarse-mask prompts while the base stays
fixed; the base checksum is verified at every epoch boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .decoder import ModelConfig, encode_image, init_base_weights, predict
from .drp import Adapter, AdapterConfig
from .errors import ChecksumError, ContractError, GenerationError, ShapeError, TrainingError
from .params import AdamState, ParamGroup, adam_step
from .prompts import Box, PromptSpec, coarse_mask, noisy_box, sample_points
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    ce: float
    dice: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False)


def dice_loss(z: Tensor, gt: np.ndarray, eps: float = 1.0) -> Tensor:
    p = T.sigmoid(z)
    g = Tensor(gt.astype(np.float64))
    inter = T.tsum(p * g)
    return 1.0 - (inter * 2.0 + eps) / (T.tsum(p) + float(g.data.sum()) + eps)


def seg_loss(logits: Tensor, gt, cfg: TrainConfig) -> LossBreakdown:
    gt = np.asarray(gt)
    if logits.shape != gt.shape:
        raise ShapeError(f"logits {logits.shape} vs ground truth {gt.shape}")
    ce = T.bce_with_logits(logits, gt.astype(np.float64))
    dice = dice_loss(logits, gt)
    total = ce * cfg.ce_w + dice * cfg.dice_w
    return LossBreakdown(ce.item(), dice.item(), total.item(), total)


def clean_prompt(scene, rng: Rng, cfg: TrainConfig) -> PromptSpec:
    if rng.uniform() < 0.5:
        return PromptSpec("gt_box", Box.from_mask(scene.visible_mask), "gt")
    k = cfg.base_point_count
    return PromptSpec("points", sample_points(scene.visible_mask, k, rng), f"k={k}")


def rts_prompt(scene, rng: Rng, cfg: TrainConfig) -> PromptSpec:
    """One prompt from the robust-training mix."""
    kinds = sorted(cfg.prompt_mix)
    wts = np.array([cfg.prompt_mix[k] for k in kinds], dtype=np.float64)
    u = rng.uniform() * wts.sum()
    kind = kinds[min(int(np.searchsorted(np.cumsum(wts), u, side="right")), len(kinds) - 1)]
    label = scene.visible_mask
    gt = Box.from_mask(label)
    H, W = label.shape
    if kind == "gt_box":
        return PromptSpec("gt_box", gt, "gt")
    if kind == "noisy_box":
        b = noisy_box(gt, cfg.noise_scale, cfg.iou_lo, cfg.iou_hi, rng, W, H)
        return PromptSpec("noisy_box", b, f"iou {cfg.iou_lo}-{cfg.iou_hi}")
    if kind == "points":
        k = int(cfg.point_counts[rng.integers(len(cfg.point_counts))])
        return PromptSpec("points", sample_points(label, k, rng), f"k={k}")
    cm = coarse_mask(label, cfg.coarse_band, cfg.coarse_flip, rng)
    return PromptSpec("coarse_mask", cm, "coarse", companion_box=gt)


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)


def train_base(scenes, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
               rng: Rng | None = None) -> tuple[ParamGroup, TrainHistory]:
    """Stage 1: joint encoder/decoder training on clean prompts, then freeze."""
    model_cfg = model_cfg or ModelConfig()
    rng = rng or Rng(cfg.seed).spawn(10)
    w = init_base_weights(model_cfg, rng.spawn(0))
    opt = AdamState(lr=cfg.lr)
    hist = TrainHistory()
    order_rng, prompt_rng = rng.spawn(1), rng.spawn(2)
    for epoch in range(cfg.base_epochs):
        order = order_rng.choice(len(scenes), len(scenes))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            w.zero_grad()
            for i in batch:
                s = scenes[i]
                emb = encode_image(w, s.image, model_cfg)
                out = predict(w, emb, clean_prompt(s, prompt_rng, cfg), model_cfg)
                lb = seg_loss(out.logits, s.visible_mask, cfg)
                _check_finite(lb.total, epoch, start)
                (lb.tensor * (1.0 / len(batch))).backward()
                losses.append(lb.total)
            adam_step(w, opt)
        hist.epoch_loss.append(float(np.mean(losses)))
        log.info("base epoch %d loss %.4f", epoch, hist.epoch_loss[-1])
    w.freeze()
    return w, hist


def embed_all(base: ParamGroup, scenes, model_cfg: ModelConfig) -> list:
    with T.no_grad():
        return [encode_image(base, s.image, model_cfg) for s in scenes]


def adapt_stable(base: ParamGroup, scenes, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                 rng: Rng | None = None, adapter: Adapter | None = None) -> tuple[Adapter, TrainHistory]:
    """Stage 2: train only the plugin weights on the robust prompt mix."""
    model_cfg = model_cfg or ModelConfig()
    if not base.frozen:
        raise ContractError("adaptation needs a frozen base")
    rng = rng or Rng(cfg.seed).spawn(20)
    if adapter is None:
        adapter = Adapter(AdapterConfig(model_cfg.channels, model_cfg.channels, cfg.s_p, model_cfg.n_layers),
                          rng=rng.spawn(0))
    checksum = base.checksum()
    embs = embed_all(base, scenes, model_cfg)
    opt = AdamState(lr=cfg.lr)
    hist = TrainHistory()
    order_rng, prompt_rng = rng.spawn(1), rng.spawn(2)
    skipped = 0
    for epoch in range(cfg.adapt_epochs):
        order = order_rng.choice(len(scenes), len(scenes))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            adapter.params.zero_grad()
            for i in batch:
                s = scenes[i]
                try:
                    prompt = rts_prompt(s, prompt_rng, cfg)
                except GenerationError:
                    skipped += 1
                    continue
                out = predict(base, embs[i], prompt, model_cfg, adapter)
                lb = seg_loss(out.logits, s.visible_mask, cfg)
                _check_finite(lb.total, epoch, start)
                (lb.tensor * (1.0 / len(batch))).backward()
                losses.append(lb.total)
            adam_step(adapter.params, opt)
        if base.checksum() != checksum:
            raise ChecksumError(f"frozen base weights changed during adaptation epoch {epoch}")
        hist.epoch_loss.append(float(np.mean(losses)))
        log.info("adapt epoch %d loss %.4f", epoch, hist.epoch_loss[-1])
    if skipped:
        log.info("skipped %d infeasible prompts", skipped)
    return adapter, hist
