"""Pytest configuration for mpfgvc tests."""

from __future__ import annotations

import json

import pytest

from mpfgvc.config import RunConfig, TextConfig, TrainConfig, ViTConfig
from mpfgvc.data.synth import generate_dataset, load_preset
from mpfgvc.tensor import precision


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run desk-scale learning checks"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    with precision("float64"):
        yield


def make_tiny_config(**train) -> RunConfig:
    """16x16 RGB, 4x4 patches (N=16), three layers, short prompts."""
    train_cfg = dict(batch_size=4, stage1_epochs=2, stage2_epochs=1)
    train_cfg.update(train)
    return RunConfig(
        vit=ViTConfig(
            image_side=16, patch_size=4, channels=3, dim=16, depth=3, heads=2, mlp_ratio=2, k=4
        ),
        text=TextConfig(depth=1, heads=2, context_length=16, tokens_per_class=4),
        train=TrainConfig(**train_cfg),
    )


@pytest.fixture
def tiny_config() -> RunConfig:
    return make_tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(load_preset("tiny"), root)
    return root


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """The pinned 8-class desk set: 200 train and 80 test images."""
    root = tmp_path_factory.mktemp("desk_data")
    generate_dataset(load_preset("desk_c8"), root)
    return root


@pytest.fixture
def make_config():
    return make_tiny_config


def _rewrite_header(path, edit):
    """Apply ``edit`` to a checkpoint's JSON header in place, keeping the body."""
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[4:8], "little")
    header = json.loads(raw[8 : 8 + header_len])
    edit(header)
    blob = json.dumps(header).encode("utf-8")
    path.write_bytes(raw[:4] + len(blob).to_bytes(4, "little") + blob + raw[8 + header_len :])


@pytest.fixture
def rewrite_header():
    return _rewrite_header
