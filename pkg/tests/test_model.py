import json

import numpy as np
import pytest

from mpfgvc.errors import ConfigError, FormatError
from mpfgvc.model import (
    MAGIC,
    MPFGVC,
    checkpoint_meta,
    load_checkpoint,
    mark_trained,
    model_from_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

NAMES = ["species0", "species1", "species2"]


def batch(cfg, n=2, seed=0):
    side = cfg.vit.image_side
    return np.random.default_rng(seed).random((n, side, side, cfg.vit.channels)).astype(np.float32)


def trainable_groups(model):
    groups = {
        "image_encoder": model.image_encoder,
        "head1": model.head1,
        "prompts": model.prompts,
        "fusion": model.fusion,
        "text_encoder": model.text_encoder,
    }
    return {name: bool(m.trainable_parameters()) for name, m in groups.items()}


def test_stage_scoping(tiny_config):
    model = MPFGVC(tiny_config, NAMES, "bird")
    model.set_stage("1")
    assert trainable_groups(model) == {
        "image_encoder": True,
        "head1": True,
        "prompts": True,
        "fusion": False,
        "text_encoder": False,
    }
    model.set_stage("2")
    assert trainable_groups(model) == {
        "image_encoder": False,
        "head1": False,
        "prompts": False,
        "fusion": True,
        "text_encoder": False,
    }
    model.set_stage("one")
    assert trainable_groups(model)["fusion"] and trainable_groups(model)["image_encoder"]
    assert not trainable_groups(model)["text_encoder"]
    with pytest.raises(ConfigError):
        model.set_stage("3")


def test_prompts_stay_frozen_without_text_prompts(make_config):
    cfg = make_config().with_overrides(
        text={"use_datp": False}, train={"fusion_mode": "self_attention"}
    )
    model = MPFGVC(cfg, NAMES)
    model.set_stage("1")
    assert not model.prompts.trainable_parameters()
    assert model.text_embeddings() is None


def test_parameter_names_are_paths(tiny_config):
    model = MPFGVC(tiny_config, NAMES)
    names = [p.name for p in model.parameters()]
    assert "prompts.X" in names
    assert "image_encoder.layers.0.attn.wq.weight" in names
    assert len(set(names)) == len(names)


def test_needs_two_classes(tiny_config):
    with pytest.raises(ConfigError):
        MPFGVC(tiny_config, ["only"])


@pytest.mark.parametrize("mode", ["head1", "similarity", "vlfm", "self_attention"])
def test_logits_per_mode(tiny_config, mode):
    model = MPFGVC(tiny_config, NAMES)
    logits, enc = model.logits(batch(tiny_config), mode)
    assert logits.shape == (2, 3)
    assert enc.final_input_length == tiny_config.vit.k + 1
    assert model.predict(batch(tiny_config), mode).shape == (2,)


def test_unknown_mode(tiny_config):
    with pytest.raises(ConfigError):
        MPFGVC(tiny_config, NAMES).logits(batch(tiny_config), "ensemble")


def test_same_seed_same_weights(tiny_config):
    a, b = MPFGVC(tiny_config, NAMES), MPFGVC(tiny_config, NAMES)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert pa.data.tobytes() == pb.data.tobytes(), name


def test_text_tower_independent_of_training_seed(make_config):
    a = MPFGVC(make_config(seed=0), NAMES)
    b = MPFGVC(make_config(seed=1), NAMES)
    assert a.text_encoder.proj.weight.data.tobytes() == b.text_encoder.proj.weight.data.tobytes()
    assert a.head1.weight.data.tobytes() != b.head1.weight.data.tobytes()


def test_checkpoint_round_trip(tmp_path, tiny_config):
    model = MPFGVC(tiny_config, NAMES, "bird")
    meta = checkpoint_meta(model, "1", epochs=2)
    path = save_checkpoint(model, tmp_path / "ck" / "stage1.bin", meta)
    assert path.read_bytes()[:4] == MAGIC
    restored, meta = model_from_checkpoint(path)
    assert meta["stage"] == "1" and meta["epochs"] == 2
    assert restored.class_names == NAMES and restored.supercategory == "bird"
    assert restored.trained_stages == {"1"}
    for (name, pa), (_, pb) in zip(model.named_parameters(), restored.named_parameters()):
        assert pa.data.tobytes() == pb.data.tobytes(), name
    images = batch(tiny_config)
    np.testing.assert_array_equal(model.predict(images), restored.predict(images))


def test_header_is_json_index(tmp_path, tiny_config):
    model = MPFGVC(tiny_config, NAMES)
    path = save_checkpoint(model, tmp_path / "m.bin")
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[4:8], "little")
    header = json.loads(raw[8 : 8 + header_len])
    names = [r["name"] for r in header["records"]]
    assert names == [name for name, _ in model.named_parameters()]
    assert all(r["dtype"].startswith("<") for r in header["records"])


def test_checkpoint_errors(tmp_path, tiny_config):
    with pytest.raises(ConfigError):
        read_checkpoint(tmp_path / "missing.bin")
    bogus = tmp_path / "bogus.bin"
    bogus.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(FormatError):
        read_checkpoint(bogus)
    model = MPFGVC(tiny_config, NAMES)
    good = save_checkpoint(model, tmp_path / "good.bin")
    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_checkpoint(truncated)
    with pytest.raises(FormatError):
        model_from_checkpoint(good)


@pytest.mark.parametrize(
    "edit",
    [
        lambda h: h["records"][0].pop("offset"),
        lambda h: h["records"][1].pop("name"),
        lambda h: h["records"][0].update(shape=None),
        lambda h: h["records"][0].update(dtype="not-a-dtype"),
        lambda h: h["records"][0].update(shape=[7, 7, 7]),
    ],
    ids=["no-offset", "no-name", "null-shape", "bad-dtype", "wrong-shape"],
)
def test_malformed_record_is_format_error(tmp_path, tiny_config, rewrite_header, edit):
    path = save_checkpoint(MPFGVC(tiny_config, NAMES), tmp_path / "m.bin")
    rewrite_header(path, edit)
    with pytest.raises(FormatError, match="m.bin"):
        read_checkpoint(path)


def test_load_into_mismatched_model(tmp_path, tiny_config):
    path = save_checkpoint(MPFGVC(tiny_config, NAMES), tmp_path / "m.bin")
    other = MPFGVC(tiny_config, NAMES + ["species3"])
    with pytest.raises(FormatError):
        load_checkpoint(other, path)


def test_mark_trained(tiny_config):
    model = MPFGVC(tiny_config, NAMES)
    mark_trained(model, "2")
    assert model.trained_stages == {"1", "2"}
    fresh = MPFGVC(tiny_config, NAMES)
    mark_trained(fresh, "one")
    assert fresh.trained_stages == {"1", "2"}
    mark_trained(fresh, "bogus")
    assert fresh.trained_stages == {"1", "2"}
