import csv
import dataclasses

import pytest

from mpfgvc.config import RunConfig
from mpfgvc.errors import ConfigError
from mpfgvc.events import EventHub, MemorySink
from mpfgvc.experiments import (
    ABLATION_TABLES,
    SEED_COLUMNS,
    SUMMARY_COLUMNS,
    AblationSpec,
    ablate,
    default_sweep_values,
    run_variant,
    summarize,
    sweep,
    write_csv,
)


@pytest.fixture
def quick_config(make_config):
    return make_config(stage1_epochs=1, stage2_epochs=1)


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_tables_cover_every_row(quick_config):
    assert len(ABLATION_TABLES["5"]) == 6
    assert [s.template for s in ABLATION_TABLES["6"]] == [
        "handcrafted", "subcategory_name", "prefix_photo", "learned_only",
    ]
    assert [s.selector for s in ABLATION_TABLES["7"]] == ["rollout", "vote", "ssvp"]
    assert [s.strategy for s in ABLATION_TABLES["strategies"]] == ["one_stage", "two_stage"]
    for specs in ABLATION_TABLES.values():
        for spec in specs:
            spec.apply(quick_config)


def test_baseline_row_switches_everything_off(quick_config):
    baseline = ABLATION_TABLES["5"][0].apply(quick_config)
    assert not baseline.vit.use_ssvp
    assert not baseline.text.use_datp
    assert baseline.train.fusion_mode == "none"
    full = ABLATION_TABLES["5"][-1].apply(quick_config)
    assert full.vit.use_ssvp and full.text.use_datp and full.train.fusion_mode == "vlfm"


def test_run_variant_row(tiny_dataset, quick_config):
    spec = AblationSpec("5", "full", "full")
    row = run_variant(dataclasses.asdict(spec), quick_config.to_dict(), 0, str(tiny_dataset))
    assert set(row) == set(SEED_COLUMNS)
    assert 0.0 <= row["top1"] <= 1.0
    assert 0.0 <= row["hit_rate_init"] <= 1.0
    again = run_variant(dataclasses.asdict(spec), quick_config.to_dict(), 0, str(tiny_dataset))
    assert again == row


def test_summarize_and_csv(tmp_path):
    specs = [AblationSpec("t", "A", "a", published_ref=90.0), AblationSpec("t", "B", "b")]
    rows = [
        {"table": "t", "variant": "a", "top1": 0.5, "hit_rate": 0.25},
        {"table": "t", "variant": "a", "top1": 0.7, "hit_rate": None},
    ]
    summary = summarize(specs, rows)
    assert summary[0]["n_seeds"] == 2
    assert summary[0]["mean_top1"] == pytest.approx(0.6)
    assert summary[0]["std_top1"] == pytest.approx(0.1)
    assert summary[0]["mean_hit_rate"] == 0.25
    assert summary[1]["n_seeds"] == 0 and summary[1]["mean_top1"] is None
    path = write_csv(tmp_path / "out.csv", SUMMARY_COLUMNS, summary)
    written = read_rows(path)
    assert written[1]["mean_top1"] == "" and written[0]["published_ref"] == "90.0"


def test_default_sweep_values(quick_config):
    assert default_sweep_values("k", quick_config) == [1, 2, 4, 8, 16]
    assert default_sweep_values("layer", quick_config) == [1, 2]
    with pytest.raises(ConfigError):
        default_sweep_values("depth", quick_config)


@pytest.mark.asyncio
async def test_ablate_strategies_writes_tables(tmp_path, tiny_dataset, quick_config):
    sink = MemorySink()
    out = await ablate(
        "strategies",
        quick_config,
        tiny_dataset,
        [0],
        out_dir=tmp_path,
        hub=EventHub([sink]),
        workers=1,
    )
    assert [r["variant"] for r in out["rows"]] == ["one_stage", "two_stage"]
    assert [s["n_seeds"] for s in out["summary"]] == [1, 1]
    summary = read_rows(tmp_path / "results" / "ablation_strategies.csv")
    assert list(summary[0]) == SUMMARY_COLUMNS
    assert summary[1]["published_ref"] == "91.8"
    seeds = read_rows(tmp_path / "results" / "ablation_strategies_seeds.csv")
    assert [r["seed"] for r in seeds] == ["0", "0"]
    assert len(sink.of("variant_done")) == 2


@pytest.mark.asyncio
async def test_ablate_unknown_table(tiny_dataset, quick_config):
    with pytest.raises(ConfigError):
        await ablate("9", quick_config, tiny_dataset, [0])


@pytest.mark.asyncio
async def test_sweep_skips_invalid_values(tmp_path, tiny_dataset, quick_config):
    sink = MemorySink()
    out = await sweep(
        "k",
        [2, 99],
        quick_config,
        tiny_dataset,
        [0],
        out_dir=tmp_path,
        hub=EventHub([sink]),
        workers=1,
    )
    assert out["skipped"] == [99]
    assert [row["value"] for row in out["table"]] == [2]
    assert sink.of("sweep_skip")[0]["value"] == 99
    written = read_rows(tmp_path / "results" / "sweep_k.csv")
    assert written[0]["param"] == "k" and written[0]["n_seeds"] == "1"


@pytest.mark.asyncio
async def test_sweep_unknown_param(tiny_dataset, quick_config):
    with pytest.raises(ConfigError):
        await sweep("depth", None, quick_config, tiny_dataset, [0])


@pytest.mark.slow
@pytest.mark.asyncio
async def test_table5_two_seeds(tmp_path, tiny_dataset, make_config):
    cfg = make_config(stage1_epochs=5, stage2_epochs=2)
    out = await ablate("5", cfg, tiny_dataset, [0, 1], out_dir=tmp_path, workers=1)
    assert len(out["rows"]) == 12
    assert [s["n_seeds"] for s in out["summary"]] == [2] * 6
    assert all(0.0 <= s["mean_top1"] <= 1.0 for s in out["summary"])


@pytest.mark.slow
@pytest.mark.asyncio
async def test_table5_full_not_below_baseline(tmp_path, desk_dataset):
    out = await ablate("5", RunConfig(), desk_dataset, range(5), out_dir=tmp_path)
    by_variant = {s["variant"]: s for s in out["summary"]}
    assert by_variant["full"]["n_seeds"] == by_variant["baseline"]["n_seeds"] == 5
    assert by_variant["full"]["mean_top1"] >= by_variant["baseline"]["mean_top1"]
