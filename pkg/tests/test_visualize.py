import json

import numpy as np
import pytest
from PIL import Image

from mpfgvc.data import load_split
from mpfgvc.model import MPFGVC, checkpoint_meta, save_checkpoint
from mpfgvc.visualize import normalize_u8, render, selection_mask, upscale, visualize


def test_normalize_u8():
    assert normalize_u8(np.array([0.0, 0.5, 1.0])).tolist() == [0, 128, 255]
    assert normalize_u8(np.full(4, 0.3)).tolist() == [0, 0, 0, 0]


def test_upscale_and_mask():
    grid = np.array([[1, 2], [3, 4]], dtype=np.uint8)
    big = upscale(grid, 3)
    assert big.shape == (6, 6)
    assert big[0, 2] == 1 and big[5, 5] == 4
    mask = selection_mask([1, 2], 2, 2)
    assert mask[0, 2] == 255 and mask[2, 0] == 255
    assert mask[0, 0] == 0 and mask[3, 3] == 0


def test_render_marks_selected_patches(tiny_dataset, tiny_config):
    test = load_split(tiny_dataset, "test")
    model = MPFGVC(tiny_config, ["a", "b", "c"], "bird")
    vis = render(model, test.pixels[0])
    cfg = tiny_config.vit
    assert vis.heatmap.shape == (cfg.image_side, cfg.image_side)
    assert len(vis.selected_ids) == cfg.k
    assert len(vis.attention) == cfg.num_patches
    lit = np.flatnonzero(vis.mask[:: cfg.patch_size, :: cfg.patch_size].ravel())
    assert sorted(lit.tolist()) == sorted(vis.selected_ids)
    assert vis.prediction in ("a", "b", "c")


def test_visualize_writes_three_files(tiny_dataset, tiny_config, tmp_path):
    model = MPFGVC(tiny_config, ["a", "b", "c"], "bird")
    ckpt = save_checkpoint(model, tmp_path / "stage1.bin", checkpoint_meta(model, "1"))
    image = tiny_dataset / "test" / "class_0" / "img_0.ppm"
    files = visualize(image, ckpt, tmp_path / "vis")
    names = ["img_0_heatmap.pgm", "img_0_mask.pgm", "img_0_selection.json"]
    assert [f.name for f in files] == names
    with Image.open(files[1]) as im:
        assert im.size == (16, 16)
    payload = json.loads(files[2].read_text(encoding="utf-8"))
    assert payload["k"] == tiny_config.vit.k == len(payload["selected_ids"])
    assert len(payload["attention"]) == tiny_config.vit.num_patches
    assert len(payload["S"]) == len(payload["S_rows"]) == 3 + 1
    assert sum(payload["S"]) == pytest.approx(1.0, abs=1e-5)
    assert payload["S_rows"] == ["visual", "a", "b", "c"]


def test_visualize_missing_inputs(tmp_path):
    with pytest.raises(FileNotFoundError):
        visualize(tmp_path / "nope.ppm", tmp_path / "nope.bin", tmp_path / "vis")


def test_render_reports_fusion_weights(tiny_dataset, tiny_config):
    test = load_split(tiny_dataset, "test")
    model = MPFGVC(tiny_config, ["a", "b", "c"], "bird")
    vis = render(model, test.pixels[0], mode="head1")
    images = (test.pixels[:1] / 255.0).astype(np.float32)
    enc = model.encode(images)
    expected = model.fusion_state(enc.e_v, model.text_embeddings(), "vlfm").S.data[0]
    np.testing.assert_allclose(vis.fusion_weights, expected, rtol=1e-5, atol=1e-6)
    assert vis.fusion_rows == ["visual", "a", "b", "c"]


def test_render_without_prompts_has_no_fusion_weights(tiny_dataset, make_config):
    cfg = make_config(fusion_mode="self_attention").with_overrides(text={"use_datp": False})
    model = MPFGVC(cfg, ["a", "b", "c"], "bird")
    vis = render(model, load_split(tiny_dataset, "test").pixels[0])
    assert vis.fusion_weights is None
    assert vis.as_dict()["S"] is None
    assert len(vis.as_dict()["attention"]) == cfg.vit.num_patches
