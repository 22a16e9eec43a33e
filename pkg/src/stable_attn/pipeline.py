"""End-to-end run: data, stage 1, stage 2, and paired evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .config import TrainConfig
from .data import generate_dataset
from .decoder import ModelConfig
from .drp import Adapter
from .evaluate import DEFAULT_CONDITIONS, ModelVariant, evaluate_stability
from .metrics import DEFAULT_B, StabilityReport
from .params import ParamGroup
from .rng import Rng
from .train import adapt_stable, embed_all, train_base

log = logging.getLogger(__name__)


def make_splits(cfg: TrainConfig):
    root = Rng(cfg.seed)
    train = generate_dataset(cfg.n_train, cfg.occlusion_prob, root.spawn(1))
    test = generate_dataset(cfg.n_test, cfg.occlusion_prob, root.spawn(2))
    return train, test


@dataclass
class PipelineResult:
    base: ParamGroup
    adapter: Adapter
    baseline: StabilityReport
    adapted: StabilityReport
    base_checksum_before: str
    base_checksum_after: str
    timings: dict = field(default_factory=dict)
    base_history: list = field(default_factory=list)
    adapt_history: list = field(default_factory=list)


def param_budget(base: ParamGroup, adapter: Adapter) -> dict:
    nb, na = base.num_params(), adapter.params.num_params()
    return {"base_params": nb, "adapter_params": na, "adapter_ratio": na / nb}


def run_pipeline(cfg: TrainConfig, conditions=DEFAULT_CONDITIONS, B: int = DEFAULT_B,
                 model_cfg: ModelConfig | None = None) -> PipelineResult:
    model_cfg = model_cfg or ModelConfig()
    t0 = time.perf_counter()
    train, test = make_splits(cfg)
    t1 = time.perf_counter()
    base, h1 = train_base(train, cfg, model_cfg)
    t2 = time.perf_counter()
    before = base.checksum()
    adapter, h2 = adapt_stable(base, train, cfg, model_cfg)
    after = base.checksum()
    t3 = time.perf_counter()
    prov = {"config_hash": cfg.hash(), "train_seed": cfg.seed}
    embs = embed_all(base, test, model_cfg)
    eval_seed = Rng(cfg.seed).spawn(3).next_u64()
    baseline = evaluate_stability(ModelVariant("baseline", base), test, conditions, B, eval_seed,
                                  model_cfg, cfg.noise_scale, prov, embs)
    adapted = evaluate_stability(ModelVariant("adapted", base, adapter), test, conditions, B, eval_seed,
                                 model_cfg, cfg.noise_scale, prov, embs)
    adapted.extras.update(param_budget(base, adapter))
    t4 = time.perf_counter()
    timings = {"data": t1 - t0, "base": t2 - t1, "adapt": t3 - t2, "eval": t4 - t3}
    log.info("pipeline seed %d timings %s", cfg.seed, timings)
    return PipelineResult(base, adapter, baseline, adapted, before, after, timings,
                          h1.epoch_loss, h2.epoch_loss)
