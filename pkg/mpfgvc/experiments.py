"""Ablation tables and hyper-parameter sweeps.

Each (variant, seed) pair is one full train + evaluate run executed in a
worker process. Results come back in submission order, so the emitted CSVs
do not depend on which worker finishes first.
"""

from __future__ import annotations

import asyncio
import csv
import dataclasses
import logging
import os
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig, scaled_k, worker_count
from .data.loader import load_split, read_meta
from .errors import ConfigError
from .events import EventHub
from .model import MPFGVC
from .tensor import precision
from .training import (
    default_eval_mode,
    evaluate,
    train_one_stage,
    train_stage1,
    train_stage2,
)

_LOGGER = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "table", "row", "variant", "n_seeds", "mean_top1", "std_top1", "mean_hit_rate", "published_ref",
]
SEED_COLUMNS = [
    "table", "row", "variant", "seed", "top1", "train_acc", "hit_rate_init", "hit_rate",
]
SWEEP_COLUMNS = ["param", "value", "n_seeds", "top1", "std_top1", "mean_hit_rate"]


@dataclass(frozen=True)
class AblationSpec:
    table: str
    row: str
    variant: str
    use_ssvp: bool = True
    use_datp: bool = True
    fusion_mode: str = "vlfm"
    template: str = "learned_only"
    selector: str = "ssvp"
    strategy: str = "two_stage"
    published_ref: Optional[float] = None

    def apply(self, cfg: RunConfig) -> RunConfig:
        return cfg.with_overrides(
            vit={"use_ssvp": self.use_ssvp, "selector": self.selector},
            text={"use_datp": self.use_datp, "template": self.template},
            train={"fusion_mode": self.fusion_mode, "one_stage_mode": self.strategy == "one_stage"},
        )


def _table5() -> List[AblationSpec]:
    rows = [
        ("Baseline", "baseline", False, False, "none", 90.8),
        ("Baseline + DaTP", "+DaTP", False, True, "none", 91.3),
        ("Baseline + DaTP + VLFM", "+DaTP+VLFM", False, True, "vlfm", 91.5),
        ("Baseline + SsVP", "+SsVP", True, False, "none", 91.2),
        ("Baseline + SsVP + DaTP", "+SsVP+DaTP", True, True, "none", 91.5),
        ("Baseline + SsVP + DaTP + VLFM", "full", True, True, "vlfm", 91.8),
    ]
    return [
        AblationSpec("5", row, variant, use_ssvp=s, use_datp=d, fusion_mode=f, published_ref=ref)
        for row, variant, s, d, f, ref in rows
    ]


def _table6() -> List[AblationSpec]:
    rows = [
        ("a photo of a {class}", "handcrafted", 91.5),
        ("a photo of X1..XJ {class}", "subcategory_name", 91.7),
        ("a photo of X1..XJ {class++}", "prefix_photo", 91.8),
        ("X1..XJ {class++}", "learned_only", 91.8),
    ]
    return [
        AblationSpec("6", row, template, template=template, published_ref=ref)
        for row, template, ref in rows
    ]


def _table7() -> List[AblationSpec]:
    rows = [
        ("Attention rollout selector", "rollout", 91.4),
        ("Head vote selector", "vote", 91.2),
        ("Class-token SsVP selector", "ssvp", 91.8),
    ]
    return [
        AblationSpec("7", row, selector, selector=selector, published_ref=ref)
        for row, selector, ref in rows
    ]


def _appendix() -> List[AblationSpec]:
    rows = [
        ("appendix-similarity", "Similarity", "similarity", "similarity", 90.9),
        ("appendix-similarity", "Fusion head", "vlfm", "vlfm", 91.8),
        ("appendix-fusion", "Without VLFM", "none", "none", 91.5),
        ("appendix-fusion", "Self-attention", "self_attention", "self_attention", 91.5),
        ("appendix-fusion", "Cross-attention", "cross_attention", "vlfm", 91.8),
    ]
    return [
        AblationSpec(table, row, variant, fusion_mode=mode, published_ref=ref)
        for table, row, variant, mode, ref in rows
    ]


ABLATION_TABLES: Dict[str, List[AblationSpec]] = {
    "5": _table5(),
    "6": _table6(),
    "7": _table7(),
    "strategies": [
        AblationSpec(
            "strategies", "One stage", "one_stage", strategy="one_stage", published_ref=91.1
        ),
        AblationSpec("strategies", "Two stage", "two_stage", published_ref=91.8),
    ],
    "appendix": _appendix(),
}

SWEEP_PARAMS = {
    "k": ("vit", "k"),
    "J": ("text", "tokens_per_class"),
    "layer": ("vit", "ssvp_layer"),
}


def default_sweep_values(param: str, cfg: RunConfig) -> List[int]:
    if param == "k":
        n = cfg.vit.num_patches
        grid = {v for v in (1, 2, 4, 8, 16, 32) if v <= n}
        return sorted(grid | {cfg.vit.k, scaled_k(n)})
    if param == "J":
        return [4, 8, 16, 32]
    if param == "layer":
        depth = cfg.vit.depth
        return [v for v in (depth - 3, depth - 2, depth - 1) if v >= 1]
    raise ConfigError(f"unknown sweep parameter '{param}' (expected {sorted(SWEEP_PARAMS)})")


def run_variant(
    spec: Dict[str, Any], cfg_dict: Dict[str, Any], seed: int, data_dir: str
) -> Dict[str, Any]:
    """One seed of one variant: train then evaluate on the test split.

    Module-level so it can be shipped to a worker process.
    """
    base = RunConfig.from_dict(cfg_dict).with_overrides(train={"seed": seed})
    ablation = AblationSpec(**spec)
    cfg = ablation.apply(base)
    with precision(cfg.precision):
        meta = read_meta(data_dir)
        train = load_split(data_dir, "train", meta)
        test = load_split(data_dir, "test", meta)
        model = MPFGVC(cfg, meta.class_names, meta.supercategory_name)
        mode = default_eval_mode(cfg.train)
        before = evaluate(model, test, "head1")
        if ablation.strategy == "one_stage":
            fit = train_one_stage(model, train, cfg.train)
        else:
            fit = train_stage1(model, train, cfg.train)
            if cfg.train.fusion_mode in ("vlfm", "self_attention"):
                fit = train_stage2(model, train, cfg.train)
        result = evaluate(model, test, mode)
    return {
        "table": ablation.table,
        "row": ablation.row,
        "variant": ablation.variant,
        "seed": seed,
        "top1": result.top1,
        "train_acc": fit.train_acc,
        "hit_rate_init": before.hit_rate,
        "hit_rate": result.hit_rate,
    }


def _executor(workers: int) -> Executor:
    if workers <= 1:
        return ThreadPoolExecutor(max_workers=1)
    return ProcessPoolExecutor(max_workers=workers)


async def _run_all(
    jobs: Sequence[tuple], workers: int, hub: EventHub
) -> List[Dict[str, Any]]:
    loop = asyncio.get_running_loop()
    executor = _executor(workers)

    async def one(spec: AblationSpec, cfg: RunConfig, seed: int, data_dir: str) -> Dict[str, Any]:
        row = await loop.run_in_executor(
            executor, run_variant, dataclasses.asdict(spec), cfg.to_dict(), seed, data_dir
        )
        hub.emit(event="variant_done", **row)
        _LOGGER.info("%s / %s seed %d: top1 %.3f", spec.table, spec.variant, seed, row["top1"])
        return row

    try:
        return list(await asyncio.gather(*(one(*job) for job in jobs)))
    finally:
        executor.shutdown(wait=True)


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(
    specs: Sequence[AblationSpec], rows: Sequence[Dict[str, Any]]
) -> List[Dict[str, Any]]:
    out = []
    for spec in specs:
        mine = [r for r in rows if r["table"] == spec.table and r["variant"] == spec.variant]
        top1 = [r["top1"] for r in mine]
        out.append(
            {
                "table": spec.table,
                "row": spec.row,
                "variant": spec.variant,
                "n_seeds": len(mine),
                "mean_top1": float(np.mean(top1)) if top1 else None,
                "std_top1": float(np.std(top1)) if top1 else None,
                "mean_hit_rate": _mean([r["hit_rate"] for r in mine]),
                "published_ref": spec.published_ref,
            }
        )
    return out


def write_csv(
    path: os.PathLike | str, columns: Sequence[str], rows: Sequence[Dict[str, Any]]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: "" if row.get(c) is None else row.get(c) for c in columns})
    return path


async def ablate(
    table: str,
    cfg: RunConfig,
    data_dir: os.PathLike | str,
    seeds: Sequence[int],
    *,
    out_dir: Optional[os.PathLike | str] = None,
    hub: Optional[EventHub] = None,
    workers: Optional[int] = None,
) -> Dict[str, Any]:
    """Train and evaluate every row of ``table`` for every seed."""
    if table not in ABLATION_TABLES:
        raise ConfigError(f"unknown ablation table '{table}' (expected {sorted(ABLATION_TABLES)})")
    specs = ABLATION_TABLES[table]
    for spec in specs:
        spec.apply(cfg)  # fail fast on an impossible combination
    hub = hub or EventHub()
    jobs = [(spec, cfg, seed, str(data_dir)) for spec in specs for seed in seeds]
    rows = await _run_all(jobs, workers or worker_count(), hub)
    summary = summarize(specs, rows)
    files: List[Path] = []
    if out_dir is not None:
        results = Path(out_dir) / "results"
        files.append(write_csv(results / f"ablation_{table}.csv", SUMMARY_COLUMNS, summary))
        files.append(write_csv(results / f"ablation_{table}_seeds.csv", SEED_COLUMNS, rows))
    return {"summary": summary, "rows": rows, "files": files}


async def sweep(
    param: str,
    values: Optional[Sequence[int]],
    cfg: RunConfig,
    data_dir: os.PathLike | str,
    seeds: Sequence[int],
    *,
    out_dir: Optional[os.PathLike | str] = None,
    hub: Optional[EventHub] = None,
    workers: Optional[int] = None,
) -> Dict[str, Any]:
    """One full run per value of ``param`` (k, J or layer); invalid values are skipped."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter '{param}' (expected {sorted(SWEEP_PARAMS)})")
    hub = hub or EventHub()
    section, key = SWEEP_PARAMS[param]
    values = list(values) if values is not None else default_sweep_values(param, cfg)
    full = AblationSpec(f"sweep-{param}", "full", "full")
    jobs, kept = [], []
    for value in values:
        try:
            variant_cfg = cfg.with_overrides(**{section: {key: int(value)}})
        except ConfigError as exc:
            _LOGGER.warning("skipping %s=%s: %s", param, value, exc)
            hub.emit(event="sweep_skip", param=param, value=value, reason=str(exc))
            continue
        kept.append(value)
        spec = dataclasses.replace(full, row=str(value), variant=f"{param}={value}")
        jobs += [(spec, variant_cfg, seed, str(data_dir)) for seed in seeds]
    rows = await _run_all(jobs, workers or worker_count(), hub)
    table = []
    for value in kept:
        mine = [r for r in rows if r["variant"] == f"{param}={value}"]
        top1 = [r["top1"] for r in mine]
        table.append(
            {
                "param": param,
                "value": value,
                "n_seeds": len(mine),
                "top1": float(np.mean(top1)),
                "std_top1": float(np.std(top1)),
                "mean_hit_rate": _mean([r["hit_rate"] for r in mine]),
            }
        )
    files: List[Path] = []
    if out_dir is not None:
        path = Path(out_dir) / "results" / f"sweep_{param}.csv"
        files.append(write_csv(path, SWEEP_COLUMNS, table))
    skipped = [v for v in values if v not in kept]
    return {"table": table, "rows": rows, "skipped": skipped, "files": files}
