"""mpfgvc command line.

Subcommands:
  gen-data   -> write a synthetic dataset from a preset
  train      -> stage 1, stage 2, or one-stage training
  eval       -> top-1 accuracy of a checkpoint (or an untrained model)
  ablate     -> component / prompt / selector / strategy / fusion tables
  sweep      -> k, J or selection-layer sweep
  gradcheck  -> finite-difference gradient suite
  visualize  -> attention heatmap, selection mask and JSON for one image

Examples:
  mpfgvc gen-data --preset desk_c8 --out runs/data
  mpfgvc train --stage 1 --data runs/data --out runs/exp1
  mpfgvc train --stage 2 --data runs/data --out runs/exp1
  mpfgvc eval --mode vlfm --data runs/data --out runs/exp1
  mpfgvc ablate --table 5 --data runs/data --seeds 0,1,2,3,4 --out runs/abl5
"""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import RunConfig
from .data.loader import load_split, read_meta
from .data.synth import generate_dataset, load_preset
from .errors import ConfigError, MpfgvcError
from .events import EventHub, JsonlSink, LossCsvSink, RunManifest
from .experiments import ABLATION_TABLES, SWEEP_PARAMS, ablate, sweep
from .gradcheck import DEFAULT_SEEDS, run_suite
from .model import MPFGVC, model_from_checkpoint, read_checkpoint
from .tensor import precision
from .training import (
    EVAL_MODES,
    default_eval_mode,
    evaluate,
    train_one_stage,
    train_stage1,
    train_stage2,
)
from .visualize import visualize

_LOGGER = logging.getLogger(__name__)

CHECKPOINTS = {"1": "stage1.bin", "2": "stage2.bin", "one": "stage_one.bin"}


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected a comma-separated list of integers, got '{text}'"
        )


def _add_common_args(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--config", help="Run config JSON (flags override its values)")
    ap.add_argument("--seed", type=int, help="Training / generation seed")
    ap.add_argument("--out", help="Output directory")
    ap.add_argument("--data", help="Dataset root (gen-data output)")
    ap.add_argument("--k", type=int, help="Number of patch tokens kept by selection")
    ap.add_argument("--J", dest="J", type=int, help="Learnable text tokens per class")
    ap.add_argument(
        "--ssvp-layer",
        dest="ssvp_layer",
        type=int,
        help="Layer whose attention drives selection",
    )
    ap.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Python logging level",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpfgvc", description="Multi-prompt fine-grained classification, desk scale"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    ap = sub.add_parser("gen-data", help="Generate a synthetic dataset")
    _add_common_args(ap)
    ap.add_argument("--preset", default="desk_c8", help="Preset name or JSON path")

    ap = sub.add_parser("train", help="Train one stage")
    _add_common_args(ap)
    ap.add_argument("--stage", choices=sorted(CHECKPOINTS), required=True)
    ap.add_argument("--checkpoint", help="Stage-1 checkpoint for stage 2")

    ap = sub.add_parser("eval", help="Evaluate on the test split")
    _add_common_args(ap)
    ap.add_argument("--mode", choices=EVAL_MODES, help="Prediction head (default from config)")
    ap.add_argument("--checkpoint", help="Checkpoint to evaluate")
    ap.add_argument("--split", default="test", choices=["train", "test"])

    ap = sub.add_parser("ablate", help="Run an ablation table")
    _add_common_args(ap)
    ap.add_argument("--table", choices=sorted(ABLATION_TABLES), required=True)
    ap.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])

    ap = sub.add_parser("sweep", help="Sweep one hyper-parameter")
    _add_common_args(ap)
    ap.add_argument("--param", choices=sorted(SWEEP_PARAMS), required=True)
    ap.add_argument("--values", type=_int_list, help="Comma-separated values")
    ap.add_argument("--seeds", type=_int_list, default=[0])

    ap = sub.add_parser("gradcheck", help="Finite-difference gradient suite")
    _add_common_args(ap)
    ap.add_argument("--seeds", type=_int_list, default=list(DEFAULT_SEEDS))
    ap.add_argument("--cases", help="Comma-separated case names (default: all)")

    ap = sub.add_parser("visualize", help="Attention heatmap and selection mask")
    _add_common_args(ap)
    ap.add_argument("--image", required=True, help="Image file (.ppm/.pgm)")
    ap.add_argument("--checkpoint", required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    vit, text, train = {}, {}, {}
    if args.seed is not None:
        train["seed"] = args.seed
    if args.k is not None:
        vit["k"] = args.k
    if args.ssvp_layer is not None:
        vit["ssvp_layer"] = args.ssvp_layer
    if args.J is not None:
        text["tokens_per_class"] = args.J
    top = {}
    if args.data:
        top["data_dir"] = args.data
    if args.out:
        top["out_dir"] = args.out
    return cfg.with_overrides(vit=vit, text=text, train=train, **top)


def _data_dir(cfg: RunConfig) -> Path:
    if not cfg.data_dir:
        raise ConfigError("no dataset given (use --data or set data_dir in the config)")
    return Path(cfg.data_dir)


def _hub(out: Path, with_loss: bool = False) -> EventHub:
    hub = EventHub([JsonlSink(str(out / "logs" / "events.jsonl"))])
    if with_loss:
        hub.add(LossCsvSink(out / "logs" / "loss.csv"))
    return hub


def _record(manifest: RunManifest, command: str, out: Path, *paths: Path) -> None:
    for p in paths:
        manifest.add(p, command)
    events = out / "logs" / "events.jsonl"
    if events.exists():
        manifest.add(events, command, "events")
    manifest.save()


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = load_preset(args.preset)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out or args.data or "runs/data")
    meta = generate_dataset(spec, out)
    manifest = RunManifest(out)
    _record(manifest, "gen-data", out, out / "meta.json")
    print(
        f"[INFO] Dataset {args.preset}: C={meta['C']} "
        f"train={meta['C'] * meta['n_train']} test={meta['C'] * meta['n_test']} -> {out}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.stage == "one":
        cfg = cfg.with_overrides(train={"one_stage_mode": True})
    data_dir = _data_dir(cfg)
    out = Path(cfg.out_dir)
    ckpt_dir = out / "checkpoints"
    target = ckpt_dir / CHECKPOINTS[args.stage]
    source = None
    if args.stage == "2":
        source = Path(args.checkpoint) if args.checkpoint else ckpt_dir / CHECKPOINTS["1"]
        if not source.exists():
            raise ConfigError(
                f"stage 2 needs a stage-1 checkpoint, none at {source} "
                "(run `train --stage 1` first)"
            )
    config_path = cfg.save(out / "config.json")
    hub = _hub(out, with_loss=True)
    hub.emit(event="run_start", command="train", stage=args.stage, config=cfg.to_dict())
    with precision(cfg.precision):
        meta = read_meta(data_dir)
        data = load_split(data_dir, "train", meta)
        model = MPFGVC(cfg, meta.class_names, meta.supercategory_name)
        if args.stage == "1":
            result = train_stage1(model, data, cfg.train, hub=hub, checkpoint_path=target)
        elif args.stage == "2":
            result = train_stage2(
                model, data, cfg.train, checkpoint=source, hub=hub, checkpoint_path=target
            )
        else:
            result = train_one_stage(model, data, cfg.train, hub=hub, checkpoint_path=target)
    manifest = RunManifest(out)
    loss_csv = out / "logs" / "loss.csv"
    _record(manifest, f"train --stage {args.stage}", out, config_path, target, loss_csv)
    acc = "n/a" if result.train_acc is None else f"{result.train_acc:.4f}"
    print(
        f"[INFO] Stage {args.stage} finished: steps={result.steps} "
        f"train_acc={acc} checkpoint={target}"
    )
    return 0


def _default_checkpoint(out: Path) -> Optional[Path]:
    for stage in ("2", "one", "1"):
        p = out / "checkpoints" / CHECKPOINTS[stage]
        if p.exists():
            return p
    return None


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    data_dir = _data_dir(cfg)
    out = Path(cfg.out_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(out)
    if args.checkpoint and not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    hub = _hub(out)
    meta = read_meta(data_dir)
    if ckpt is not None:
        _, ck_meta = read_checkpoint(ckpt)
        cfg = RunConfig.from_dict(ck_meta.get("config", cfg.to_dict()))
    mode = args.mode or default_eval_mode(cfg.train)
    with precision(cfg.precision):
        if ckpt is not None:
            model, _ = model_from_checkpoint(ckpt)
        else:
            _LOGGER.warning("no checkpoint found, evaluating an untrained model")
            model = MPFGVC(cfg, meta.class_names, meta.supercategory_name)
        data = load_split(data_dir, args.split, meta)
        result = evaluate(model, data, mode, hub=hub)
    results = out / "results" / f"eval_{mode}.json"
    results.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(result.as_dict(), checkpoint=str(ckpt) if ckpt else None, split=args.split)
    results.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    _record(RunManifest(out), "eval", out, results)
    hit = "n/a" if result.hit_rate is None else f"{result.hit_rate:.3f}"
    print(f"[INFO] top1={result.top1:.4f} mode={mode} n={result.n} hit_rate={hit}")
    return 0


async def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    cfg.save(out / "config.json")
    res = await ablate(
        args.table, cfg, _data_dir(cfg), args.seeds, out_dir=out, hub=_hub(out)
    )
    command = f"ablate --table {args.table}"
    _record(RunManifest(out), command, out, out / "config.json", *res["files"])
    for row in res["summary"]:
        ref = "" if row["published_ref"] is None else f" (reference {row['published_ref']})"
        print(f"[INFO] {row['row']:<34} top1={row['mean_top1']:.4f} +- {row['std_top1']:.4f}{ref}")
    return 0


async def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    cfg.save(out / "config.json")
    res = await sweep(
        args.param, args.values, cfg, _data_dir(cfg), args.seeds, out_dir=out, hub=_hub(out)
    )
    command = f"sweep --param {args.param}"
    _record(RunManifest(out), command, out, out / "config.json", *res["files"])
    for row in res["table"]:
        print(f"[INFO] {args.param}={row['value']} top1={row['top1']:.4f}")
    for value in res["skipped"]:
        print(f"[INFO] {args.param}={value} skipped (invalid for this config)")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    names = [c for c in args.cases.split(",") if c] if args.cases else None
    report = run_suite(names, args.seeds)
    for line in report.lines():
        print(line)
    if not report.passed:
        bad = ", ".join(c.name for c in report.failures)
        print(f"[ERROR] gradient check failed for: {bad}", file=sys.stderr)
        return 1
    print(f"[INFO] All {len(report.cases)} gradient checks passed in {report.seconds:.1f}s")
    return 0


def cmd_visualize(args: argparse.Namespace) -> int:
    out = Path(args.out or "runs/visualize")
    files = visualize(args.image, args.checkpoint, out)
    _record(RunManifest(out), "visualize", out, *files)
    for f in files:
        print(f"[INFO] wrote {f}")
    return 0


async def main_async(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.cmd == "gen-data":
            return cmd_gen_data(args)
        if args.cmd == "train":
            return cmd_train(args)
        if args.cmd == "eval":
            return cmd_eval(args)
        if args.cmd == "ablate":
            return await cmd_ablate(args)
        if args.cmd == "sweep":
            return await cmd_sweep(args)
        if args.cmd == "gradcheck":
            return cmd_gradcheck(args)
        if args.cmd == "visualize":
            return cmd_visualize(args)
    except (MpfgvcError, OSError) as exc:
        print(f"[ERROR] {exc}", file=sys.stderr)
        return 1
    parser.error(f"unknown command {args.cmd}")
    return 2


def main():  # pragma: no cover
    raise SystemExit(asyncio.run(main_async()))


if __name__ == "__main__":  # pragma: no cover
    main()
