"""Acceptance suite. Each test prints one ``criterion N [PASS|FAIL]`` line;
the lines are repeated in the pytest terminal summary.

The three-seed benchmark run (criteria 7-9) takes several minutes on one core.
"""

import hashlib
import time

import numpy as np
import pytest

from fd import check_op, numeric_grad, rel_err
from stable_attn import tensor as T
from stable_attn.config import TrainConfig
from stable_attn.data import generate_dataset, write_dataset
from stable_attn.decoder import ModelConfig, _attn, cross_attention, encode_image, init_base_weights, predict
from stable_attn.drp import (Adapter, AdapterConfig, blended_attention, init_router_weights, route)
from stable_attn.dsp import deformable_features, dsp_cross_attention, init_dsp_weights, predict_offsets_amplitudes
from stable_attn.evaluate import ModelVariant, evaluate_stability
from stable_attn.metrics import stability_score
from stable_attn.params import ParamGroup, save_checkpoint
from stable_attn.pipeline import make_splits, param_budget
from stable_attn.prompts import Box, PromptSpec, box_iou, coarse_mask, noisy_box, sample_points
from stable_attn.rng import Rng
from stable_attn.tensor import Tensor
from stable_attn.train import adapt_stable, embed_all, seg_loss, train_base

C = 8
BENCH_SEEDS = (1, 2, 3)
BENCH_CONDITIONS = ("gt_box", "noisy_box:0.5-0.6", "points:1")


# 1 ---------------------------------------------------------------------------

def _union_count_oracle(masks):
    """Pixel-by-pixel union and per-mask counts with plain Python loops."""
    H, W = masks[0].shape
    union = 0
    counts = [0] * len(masks)
    for y in range(H):
        for x in range(W):
            hit = False
            for i, m in enumerate(masks):
                if m[y, x]:
                    counts[i] += 1
                    hit = True
            union += hit
    if union == 0:
        return 1.0
    return sum(c / union for c in counts) / len(masks)


def test_criterion_01_msf_oracle(criterion):
    rng = np.random.default_rng(101)
    worst, t0 = 0.0, time.perf_counter()
    for i in range(100):
        B = int(rng.integers(1, 6))
        density = rng.uniform(0.0, 0.6) if i % 10 else 0.0  # include all-empty sets
        masks = [rng.uniform(size=(16, 16)) < density for _ in range(B)]
        worst = max(worst, abs(stability_score(masks) - _union_count_oracle(masks)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    assert criterion(1, "mSF oracle equivalence", ok, f"max |diff| {worst:.1e} over 100 sets, {elapsed:.2f}s")


# 2 ---------------------------------------------------------------------------

def test_criterion_02_identity_reduction(criterion):
    t0 = time.perf_counter()
    mc = ModelConfig()
    base = init_base_weights(mc, Rng(21))
    base.freeze()
    scenes = generate_dataset(20, 0.3, Rng(22))
    ad = Adapter(AdapterConfig(), rng=Rng(23))
    # randomise everything except the zero-initialised offset head and amplitude bias
    r = Rng(24)
    for name, t in ad.params:
        if "conv_out" in name or name.endswith("conv_in.b"):
            continue
        t.data = r.normal(t.shape) * 0.5
    for l in range(ad.cfg.n_layers):
        assert not ad.params[f"l{l}.dsp.conv_out.w"].data.any()
        assert not ad.params[f"l{l}.dsp.conv_in.b"].data[-1]
    ad.alpha_override = (0.0, 1.0)
    prng = Rng(25)
    worst = 0.0
    with T.no_grad():
        for i, s in enumerate(scenes):
            gt = Box.from_mask(s.visible_mask)
            kind = ("gt_box", "noisy_box", "points", "coarse_mask")[i % 4]
            if kind == "gt_box":
                p = PromptSpec("gt_box", gt)
            elif kind == "noisy_box":
                p = PromptSpec("noisy_box", noisy_box(gt, 0.4, 0.5, 1.0, prng, 64, 64))
            elif kind == "points":
                p = PromptSpec("points", sample_points(s.visible_mask, 1 + i % 3, prng))
            else:
                p = PromptSpec("coarse_mask", coarse_mask(s.visible_mask, 2, 0.5, prng), companion_box=gt)
            emb = encode_image(base, s.image, mc)
            a = predict(base, emb, p, mc).logits.data
            b = predict(base, emb, p, mc, ad).logits.data
            worst = max(worst, float(np.max(np.abs(a - b))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10.0
    assert criterion(2, "identity-at-init reduction", ok, f"max |diff| {worst:.1e} on 20 pairs, {elapsed:.2f}s")


# 3 ---------------------------------------------------------------------------

def _plugin_setup(seed):
    r = Rng(seed)
    base = ParamGroup()
    _attn(base, "t2i", C, r)
    base.freeze()
    dsp = ParamGroup()
    init_dsp_weights(dsp, "d", C, C, r)
    for _, t in dsp:
        t.data = r.normal(t.shape) * 0.5
    n = 4
    return (base, dsp, Tensor(r.normal((3, C))), Tensor(r.normal((3, C))), Tensor(r.normal((n, n, C))),
            Tensor(r.normal((n * n, C))))


def test_criterion_03_endpoint_routing(criterion):
    endpoint = 0.0
    for seed in range(10):
        base, dsp, tok, pe, x, ipe = _plugin_setup(seed)
        xd, _ = deformable_features(x, dsp, "d", 0.25)
        reg, _ = cross_attention(tok, pe, T.reshape(x, (16, C)), ipe, base, "t2i")
        dca, _ = dsp_cross_attention(tok, pe, x, ipe, base, "t2i", dsp, "d", 0.25)
        o10, _ = blended_attention(tok, pe, xd, x, Tensor([[1.0, 0.0]]), ipe, base, "t2i")
        o01, _ = blended_attention(tok, pe, xd, x, Tensor([[0.0, 1.0]]), ipe, base, "t2i")
        endpoint = max(endpoint, float(np.max(np.abs(o10.data - dca.data))),
                       float(np.max(np.abs(o01.data - reg.data))))
    total = 0.0
    for seed in range(100):
        g = ParamGroup()
        init_router_weights(g, "r", C, Rng(seed))
        r = Rng(1000 + seed)
        for _, t in g:
            t.data = r.normal(t.shape)
        alpha = route(Tensor(r.normal((1, C)) * 3.0), g, "r").data
        total = max(total, abs(alpha.sum() - float(np.exp(g["r.log_s"].data[0]))))
    ok = endpoint <= 1e-12 and total <= 1e-12
    assert criterion(3, "endpoint routing", ok,
                     f"endpoint max |diff| {endpoint:.1e}, |a1+a2-s| max {total:.1e} over 100 router states")


# 4 ---------------------------------------------------------------------------

GRAD_OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(3, 4, 2), (3, 4, 1)]),
    "div": (lambda a, b: a / (T.exp(b) + 1.0), [(5,), (5,)]),
    "neg": (lambda a: -a, [(6,)]),
    "exp": (T.exp, [(8,)]),
    "tanh": (T.tanh, [(10,)]),
    "sigmoid": (T.sigmoid, [(10,)]),
    "gelu": (T.gelu, [(10,)]),
    "scaled_tanh": (lambda x: T.scaled_tanh(x, 0.25), [(10,)]),
    "matmul": (T.matmul, [(3, 4), (4, 2)]),
    "transpose": (lambda a: T.transpose(a), [(3, 5)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "index": (lambda a: T.index(a, (slice(1, 3), slice(None))), [(4, 3)]),
    "concat": (lambda a, b: T.concat([a, b]), [(2, 3), (3, 3)]),
    "sum": (lambda a: T.tsum(a), [(3, 4)]),
    "mean": (lambda a: T.mean(a), [(3, 4)]),
    "softmax_rows": (T.softmax_rows, [(3, 5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(4, 6), (6,), (6,)]),
    "conv_1x1": (T.conv_1x1, [(3, 3, 4), (4, 2), (2,)]),
    "depthwise_conv5x5": (T.depthwise_conv5x5, [(6, 6, 2), (5, 5, 2), (2,)]),
    "patchify": (lambda x: T.patchify(x, 2), [(4, 6, 2)]),
}


def _grid_sample_err(rng):
    while True:
        loc = rng.uniform(-0.9, 0.9, size=(3, 3, 2))
        pix = (loc + 1) * 1.5
        if np.min(np.abs(pix - np.round(pix))) > 1e-3:
            break  # away from the bilinear kinks
    x = rng.normal(size=(4, 4, 2))
    probe = rng.normal(size=(3, 3, 2))
    xt, lt = Tensor(x.copy(), requires_grad=True), Tensor(loc.copy(), requires_grad=True)
    (T.grid_sample_bilinear(xt, lt) * Tensor(probe)).sum().backward()
    gx, gl = numeric_grad(lambda: float((T.grid_sample_bilinear(Tensor(x), Tensor(loc)).data * probe).sum()),
                          [x, loc])
    return max(rel_err(xt.grad, gx), rel_err(lt.grad, gl))


def _loss_err(rng):
    z0 = rng.normal(size=(5, 5))
    gt = rng.uniform(size=(5, 5)) > 0.5
    z = Tensor(z0.copy(), requires_grad=True)
    seg_loss(z, gt, TrainConfig()).tensor.backward()
    (num,) = numeric_grad(lambda: seg_loss(Tensor(z0), gt, TrainConfig()).total, [z0])
    return rel_err(z.grad, num)


def _dcattn_err(trial, rng):
    base, dsp, tok, pe, x, ipe = _plugin_setup(500 + trial)
    for _, t in dsp:
        t.data = rng.normal(size=t.shape) * 0.4
    probe = rng.normal(size=(3, C))
    names = [n for n, _ in dsp]

    def loss():
        out, _ = dsp_cross_attention(tok, pe, x, ipe, base, "t2i", dsp, "d", 0.25)
        return (out * Tensor(probe)).sum()

    dsp.zero_grad()
    loss().backward()
    with T.no_grad():
        numeric = numeric_grad(lambda: loss().item(), [dsp[n].data for n in names])
    return max(rel_err(dsp[n].grad, num) for n, num in zip(names, numeric))


def test_criterion_04_gradients(criterion):
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    worst = {}
    for name, (build, shapes) in GRAD_OPS.items():
        worst[name] = max(check_op(build, shapes, rng) for _ in range(10))
    worst["grid_sample_bilinear"] = max(_grid_sample_err(rng) for _ in range(10))
    worst["seg_loss"] = max(_loss_err(rng) for _ in range(10))
    worst["dcattn_offset_net"] = max(_dcattn_err(i, rng) for i in range(10))
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err <= 1e-4 and elapsed < 60.0
    assert criterion(4, "gradient correctness", ok,
                     f"{len(worst)} ops x 10 instances, worst {name} rel err {err:.1e}, {elapsed:.1f}s")


# 5 ---------------------------------------------------------------------------

def test_criterion_05_offset_bound(criterion):
    r = Rng(505)
    excess = -np.inf
    for i in range(1000):
        s_p = float(np.exp(r.uniform() * 4.0 - 3.0))  # 0.05 .. 2.7
        g = ParamGroup()
        init_dsp_weights(g, "d", C, C, Rng(i))
        scale = 10.0 ** (r.uniform() * 4.0 - 2.0)  # weights from tiny to very large
        for _, t in g:
            t.data = r.normal(t.shape) * scale
        x = Tensor(r.normal((6, 6, C)) * 10.0 ** (r.uniform() * 3.0 - 1.0))
        delta, amp = predict_offsets_amplitudes(x, g, "d", s_p)
        excess = max(excess, float(np.max(np.abs(delta.data))) / s_p)
        assert amp.data.min() > 0.0 and amp.data.max() < 2.0
    ok = excess < 1.0
    assert criterion(5, "offset bound", ok, f"max |dp|/s_p = {excess:.17g} over 1000 random inputs")


# 6 ---------------------------------------------------------------------------

def _box_iou_oracle(a: Box, b: Box) -> float:
    """Area-based IoU written independently: clip the intersection corners."""
    ix = sorted([a.x0, a.x1, b.x0, b.x1])
    iy = sorted([a.y0, a.y1, b.y0, b.y1])
    overlap_x = a.x1 > b.x0 and b.x1 > a.x0
    overlap_y = a.y1 > b.y0 and b.y1 > a.y0
    inter = (ix[2] - ix[1]) * (iy[2] - iy[1]) if overlap_x and overlap_y else 0.0
    union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter
    return inter / union


def test_criterion_06_noisy_box(criterion):
    rng = Rng(606)
    scenes = generate_dataset(50, 0.3, Rng(607))
    lo = hi = None
    bad = 0
    for i in range(1000):
        gt = Box.from_mask(scenes[i % 50].visible_mask)
        b = noisy_box(gt, 0.4, 0.5, 0.6, rng, 64, 64)
        iou = box_iou(b, gt)
        ref = _box_iou_oracle(b, gt)
        if not (0.5 <= iou <= 0.6 and abs(iou - ref) <= 1e-12 and 0 <= b.x0 < b.x1 <= 64 and 0 <= b.y0 < b.y1 <= 64):
            bad += 1
        lo = iou if lo is None else min(lo, iou)
        hi = iou if hi is None else max(hi, iou)
    ok = bad == 0
    assert criterion(6, "noisy-box generator", ok, f"1000 draws, IoU range [{lo:.4f}, {hi:.4f}], {bad} violations")


# 7, 8, 9: three-seed desk-scale benchmark ---------------------------------------

def _digest(path):
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    mc = ModelConfig()
    runs = {}
    t0 = time.perf_counter()
    for seed in BENCH_SEEDS:
        cfg = TrainConfig(seed=seed)
        train, test = make_splits(cfg)
        base, _ = train_base(train, cfg, mc)
        save_checkpoint(root / f"base{seed}_before", {"base": base}, {"seed": seed, "config_hash": cfg.hash()})
        adapter, _ = adapt_stable(base, train, cfg, mc)
        save_checkpoint(root / f"base{seed}_after", {"base": base}, {"seed": seed, "config_hash": cfg.hash()})
        embs = embed_all(base, test, mc)
        eval_seed = Rng(seed).spawn(3).next_u64()
        prov = {"config_hash": cfg.hash(), "train_seed": seed}
        baseline = evaluate_stability(ModelVariant("baseline", base), test, BENCH_CONDITIONS, 20, eval_seed,
                                      mc, cfg.noise_scale, prov, embs)
        adapted = evaluate_stability(ModelVariant("adapted", base, adapter), test, BENCH_CONDITIONS, 20,
                                     eval_seed, mc, cfg.noise_scale, prov, embs)
        adapted.extras.update(param_budget(base, adapter))
        runs[seed] = {
            "baseline": baseline, "adapted": adapted,
            "before": _digest(root / f"base{seed}_before"), "after": _digest(root / f"base{seed}_after"),
        }
    return runs, time.perf_counter() - t0


def test_criterion_07_frozen_base(criterion, benchmark):
    runs, _ = benchmark
    same = {s: r["before"] == r["after"] for s, r in runs.items()}
    ok = all(same.values())
    assert criterion(7, "frozen-base guarantee", ok,
                     "base checkpoint bytes identical before/after adaptation for seeds "
                     + ", ".join(f"{s}={'yes' if v else 'NO'}" for s, v in same.items()))


def test_criterion_08_stability_trend(criterion, benchmark):
    runs, elapsed = benchmark
    failures, parts = [], []
    for seed, r in runs.items():
        b, a = r["baseline"].per_condition, r["adapted"].per_condition
        for cond in ("noisy_box:0.5-0.6", "points:1"):
            for metric in ("miou", "msf"):
                vb, va = getattr(b[cond], metric), getattr(a[cond], metric)
                if not va > vb:
                    failures.append(f"seed {seed} {cond} {metric} {vb:.4f}->{va:.4f}")
            parts.append(f"s{seed} {cond.split(':')[0]} mIoU {b[cond].miou:.3f}->{a[cond].miou:.3f} "
                         f"mSF {b[cond].msf:.3f}->{a[cond].msf:.3f}")
        drop = b["gt_box"].miou - a["gt_box"].miou
        parts.append(f"s{seed} gt_box mIoU {b['gt_box'].miou:.3f}->{a['gt_box'].miou:.3f}")
        if drop > 0.03:
            failures.append(f"seed {seed} gt_box mIoU drop {drop:.4f}")
    ok = not failures and elapsed < 15 * 60
    detail = f"{elapsed / 60:.1f} min; " + "; ".join(parts)
    if failures:
        detail += " | failing: " + "; ".join(failures)
    assert criterion(8, "desk-scale stability trend", ok, detail)


def test_criterion_09_parameter_budget(criterion, benchmark):
    runs, _ = benchmark
    base = init_base_weights(ModelConfig(), Rng(0))
    ad = Adapter(AdapterConfig(), rng=Rng(0))
    budget = param_budget(base, ad)
    reported = all(r["adapted"].extras.get("adapter_ratio") == budget["adapter_ratio"] for r in runs.values())
    ok = budget["adapter_ratio"] < 0.15 and reported
    assert criterion(9, "parameter budget", ok,
                     f"adapter {budget['adapter_params']} / base {budget['base_params']} = "
                     f"{100 * budget['adapter_ratio']:.2f}% (reported in eval extras: {reported})")


# 10 --------------------------------------------------------------------------

def test_criterion_10_determinism(criterion, tmp_path):
    cfg = TrainConfig(seed=10, n_train=12, n_test=4, base_epochs=2, adapt_epochs=1, batch_size=4)
    digests = []
    for rep in ("a", "b"):
        out = tmp_path / rep
        train, test = make_splits(cfg)
        prov = {"seed": cfg.seed, "config_hash": cfg.hash()}
        write_dataset(out / "data" / "train", train, prov)
        write_dataset(out / "data" / "test", test, prov)
        base, _ = train_base(train, cfg)
        save_checkpoint(out / "base", {"base": base}, prov)
        adapter, _ = adapt_stable(base, train, cfg)
        save_checkpoint(out / "adapted", {"base": base, "adapter": adapter.params}, prov)
        digests.append({k: _digest(out / k) for k in ("data", "base", "adapted")})
    ok = digests[0] == digests[1]
    assert criterion(10, "checkpoint and dataset determinism", ok,
                     "byte-identical " + ", ".join(f"{k}={'yes' if digests[0][k] == digests[1][k] else 'NO'}"
                                                   for k in digests[0]))
