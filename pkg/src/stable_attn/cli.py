"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, default_run_config, load_run_config
from .data import read_dataset, write_dataset
from .decoder import ModelConfig, dump_attention, encode_image, predict
from .drp import Adapter, AdapterConfig
from .errors import ChecksumError, ConfigError, ContractError, GenerationError, ShapeError, TrainingError
from .evaluate import DEFAULT_CONDITIONS, ModelVariant, evaluate_stability, parse_condition
from .masks import read_mask_pgm
from .metrics import DEFAULT_B, aggregate_report, boundary_iou, mask_iou, stability_score
from .params import load_checkpoint, save_checkpoint
from .pipeline import make_splits, param_budget
from .prompts import Box, PointSet, PromptSpec
from .rng import Rng
from .train import adapt_stable, train_base

log = logging.getLogger("stable_attn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_config(args) -> tuple[TrainConfig, dict]:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise FileNotFoundError(f"cannot read config {args.config}: {e.strerror}") from e
        cfg, paths = load_run_config(text)
    else:
        cfg, paths = TrainConfig(), {}
    if args.seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg, paths


def _path(args, paths: dict, name: str, required: bool = True) -> Path | None:
    value = getattr(args, name, None) or paths.get(name)
    if value is None and required:
        raise UsageError(f"--{name} is required (or set paths.{name} in the config)")
    return Path(value) if value is not None else None


def _provenance(cfg: TrainConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _split_dir(root: Path, split: str) -> Path:
    sub = root / split
    return sub if (sub / "dataset.json").exists() else root


def _load_scenes(root: Path, split: str):
    d = _split_dir(root, split)
    if not (d / "dataset.json").exists():
        raise FileNotFoundError(f"no dataset found at {root}")
    return read_dataset(d)


def _load_model(path: Path, cfg: TrainConfig, use_adapter: bool = True):
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no STBL1 checkpoint at {path}")
    groups, manifest = load_checkpoint(path)
    if "base" not in groups:
        raise ContractError(f"{path}: checkpoint has no base group")
    base = groups["base"]
    recorded = manifest.get("checksums", {}).get("base")
    if recorded is not None and recorded != base.checksum():
        raise ChecksumError(f"{path}: base checksum does not match its manifest")
    adapter = None
    if use_adapter and "adapter" in groups:
        meta = manifest.get("meta", {})
        mc = ModelConfig(**meta.get("model", {}))
        s_p = meta.get("train", {}).get("s_p", cfg.s_p)
        adapter = Adapter(AdapterConfig(mc.channels, mc.channels, s_p, mc.n_layers), params=groups["adapter"])
    model_cfg = ModelConfig(**manifest.get("meta", {}).get("model", {}))
    return base, adapter, manifest, model_cfg


# subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg, paths = _load_config(args)
    out = _path(args, paths, "out")
    train, test = make_splits(cfg)
    prov = {**_provenance(cfg), "occlusion_prob": cfg.occlusion_prob}
    write_dataset(out / "train", train, {**prov, "split": "train"})
    write_dataset(out / "test", test, {**prov, "split": "test"})
    print(f"wrote {len(train)} train / {len(test)} test scenes to {out}")
    return 0


def cmd_train_base(args) -> int:
    cfg, paths = _load_config(args)
    data, out = _path(args, paths, "data"), _path(args, paths, "out")
    scenes = _load_scenes(data, "train")
    model_cfg = ModelConfig()
    base, hist = train_base(scenes, cfg, model_cfg)
    meta = {**_provenance(cfg), "stage": "base", "train": cfg.to_dict(), "model": model_cfg.to_dict(),
            "epoch_loss": hist.epoch_loss}
    save_checkpoint(out, {"base": base}, meta)
    print(f"base checkpoint {out} checksum {base.checksum()[:16]} final loss {hist.epoch_loss[-1]:.4f}")
    return 0


def cmd_adapt(args) -> int:
    cfg, paths = _load_config(args)
    data, base_path, out = _path(args, paths, "data"), _path(args, paths, "base"), _path(args, paths, "out")
    base, _, manifest, model_cfg = _load_model(base_path, cfg, use_adapter=False)
    before = base.checksum()
    scenes = _load_scenes(data, "train")
    adapter, hist = adapt_stable(base, scenes, cfg, model_cfg)
    if base.checksum() != before:
        raise ChecksumError("frozen base changed during adaptation")
    meta = {**_provenance(cfg), "stage": "adapted", "train": cfg.to_dict(), "model": model_cfg.to_dict(),
            "base_checksum": before, "epoch_loss": hist.epoch_loss, **param_budget(base, adapter)}
    save_checkpoint(out, {"base": base, "adapter": adapter.params}, meta)
    print(f"adapted checkpoint {out}; adapter params {adapter.params.num_params()} "
          f"({100 * meta['adapter_ratio']:.1f}% of base)")
    return 0


def cmd_eval(args) -> int:
    cfg, paths = _load_config(args)
    data, ck, out = _path(args, paths, "data"), _path(args, paths, "checkpoint"), _path(args, paths, "out")
    base, adapter, manifest, model_cfg = _load_model(ck, cfg, use_adapter=not args.no_adapter)
    conds = [parse_condition(c) for c in args.conditions.split(",")] if args.conditions else \
        [parse_condition(c) for c in DEFAULT_CONDITIONS]
    if args.B < 1:
        raise UsageError("--B must be >= 1")
    scenes = _load_scenes(data, "test")
    variant = ModelVariant("adapted" if adapter is not None else "baseline", base, adapter)
    eval_seed = Rng(cfg.seed).spawn(3).next_u64()
    report = evaluate_stability(variant, scenes, conds, args.B, eval_seed, model_cfg, cfg.noise_scale,
                                {**_provenance(cfg), "checkpoint": str(ck), "s_p": cfg.s_p})
    if adapter is not None:
        report.extras.update(param_budget(base, adapter))
    out.mkdir(parents=True, exist_ok=True)
    csv_path, _ = report.write(out / "report")
    for cond, metric, value, n in report.rows():
        print(f"{cond:20s} {metric:6s} {value:.4f} (n={n})")
    if adapter is not None:
        print(f"adapter parameters: {report.extras['adapter_params']} "
              f"({100 * report.extras['adapter_ratio']:.1f}% of {report.extras['base_params']} base)")
    print(f"report written to {csv_path}")
    return 0


def cmd_metrics(args) -> int:
    mask_dir = Path(args.masks)
    files = sorted(mask_dir.glob("*.pgm"))
    if args.gt:
        gt_path = Path(args.gt).resolve()
        files = [f for f in files if f.resolve() != gt_path]
    if not files:
        raise FileNotFoundError(f"no PGM masks in {mask_dir}")
    masks = [read_mask_pgm(f) for f in files]
    scores = {"msf": stability_score(masks)}
    if args.gt:
        gt = read_mask_pgm(args.gt)
        scores["miou"] = float(np.mean([mask_iou(m, gt) for m in masks]))
        scores["mbiou"] = float(np.mean([boundary_iou(m, gt, args.d) for m in masks]))
    else:
        scores["miou"] = scores["mbiou"] = float("nan")
    report = aggregate_report({args.condition: [scores]}, {"masks": str(mask_dir), "B": len(masks)})
    print("condition,metric,value,n")
    for cond, metric, value, n in report.rows():
        print(f"{cond},{metric},{value!r},{len(masks)}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        report.write(Path(args.out) / "metrics")
    return 0


def _parse_prompt(text: str, label) -> PromptSpec:
    text = text.strip()
    if text.startswith("{"):
        return PromptSpec.from_json(json.loads(text))
    if text == "gt_box":
        return PromptSpec("gt_box", Box.from_mask(label), "gt")
    kind, _, arg = text.partition(":")
    if kind == "box":
        return PromptSpec("noisy_box", Box(*(float(v) for v in arg.split(","))), "user")
    if kind == "point":
        xy = np.array([float(v) for v in arg.split(",")]).reshape(-1, 2)
        return PromptSpec("points", PointSet(xy), f"k={len(xy)}")
    raise UsageError(f"cannot parse prompt {text!r}")


def cmd_dump_attn(args) -> int:
    cfg, paths = _load_config(args)
    data, ck, out = _path(args, paths, "data"), _path(args, paths, "checkpoint"), _path(args, paths, "out")
    base, adapter, _, model_cfg = _load_model(ck, cfg)
    scenes = _load_scenes(data, "test")
    if not 0 <= args.scene < len(scenes):
        raise UsageError(f"--scene must be in [0, {len(scenes) - 1}]")
    scene = scenes[args.scene]
    prompt = _parse_prompt(args.prompt, scene.visible_mask)
    emb = encode_image(base, scene.image, model_cfg)
    rec = predict(base, emb, prompt, model_cfg, adapter).record
    files = dump_attention(rec, out, model_cfg.feat_size, args.layer, provenance=_provenance(cfg))
    print(f"wrote {len(files)} files to {out}")
    return 0


def cmd_dump_defaults(args) -> int:
    print(json.dumps(default_run_config(), indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stable-attn", description="Prompt-robust toy promptable segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, *names):
        sp.add_argument("--config", help="run-config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        for n in names:
            sp.add_argument(f"--{n}")
        return sp

    common(sub.add_parser("gen-data", help="write train/test synthetic scenes"))
    common(sub.add_parser("train-base", help="stage 1: train and freeze the base model"), "data")
    common(sub.add_parser("adapt", help="stage 2: train the sampling/routing plugins"), "data", "base")
    ev = common(sub.add_parser("eval", help="stability evaluation"), "data", "checkpoint")
    ev.add_argument("--B", type=int, default=DEFAULT_B, help="prompts per image and condition")
    ev.add_argument("--conditions", help="comma list, e.g. gt_box,noisy_box:0.5-0.6,points:1")
    ev.add_argument("--no-adapter", action="store_true", help="evaluate the frozen base only")
    mt = sub.add_parser("metrics", help="mIoU/mBIoU/mSF over a directory of PGM masks")
    mt.add_argument("--masks", required=True)
    mt.add_argument("--gt", help="ground-truth PGM (excluded from the set if inside --masks)")
    mt.add_argument("--d", type=int, default=None, help="boundary width in pixels")
    mt.add_argument("--condition", default="user")
    mt.add_argument("--out")
    da = common(sub.add_parser("dump-attn", help="token-to-image attention heatmaps"), "data", "checkpoint")
    da.add_argument("--scene", type=int, default=0)
    da.add_argument("--prompt", default="gt_box", help="gt_box | box:x0,y0,x1,y1 | point:x,y[,x,y...] | JSON")
    da.add_argument("--layer", type=int, default=-1)
    sub.add_parser("dump-defaults", help="print the default run config")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data, "train-base": cmd_train_base, "adapt": cmd_adapt, "eval": cmd_eval,
    "metrics": cmd_metrics, "dump-attn": cmd_dump_attn, "dump-defaults": cmd_dump_defaults,
}


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ChecksumError as e:
        print(f"checksum violation: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 2
    except (TrainingError, GenerationError, ContractError, ShapeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
