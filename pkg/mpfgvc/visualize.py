"""Attention heatmap, selection mask and selection JSON for one image."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from PIL import Image

from .data.loader import read_image
from .model import MPFGVC, model_from_checkpoint, read_checkpoint
from .ssvp import aggregate_head_attention
from .tensor import get_default_dtype, no_grad, precision
from .training import default_eval_mode

_LOGGER = logging.getLogger(__name__)


@dataclass
class Visualization:
    heatmap: np.ndarray  # uint8 [side, side]
    mask: np.ndarray  # uint8 [side, side]
    selected_ids: List[int]
    attention: List[float]  # aggregated class-token attention over the N patches
    fusion_weights: Optional[List[float]] = None  # S over [visual; class_1..class_C]
    fusion_rows: Optional[List[str]] = None
    prediction: Optional[str] = None

    def as_dict(self) -> Dict[str, Any]:
        return {
            "selected_ids": self.selected_ids,
            "k": len(self.selected_ids),
            "S": self.fusion_weights,
            "S_rows": self.fusion_rows,
            "attention": self.attention,
            "prediction": self.prediction,
        }


def normalize_u8(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant input maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def upscale(grid_values: np.ndarray, patch_size: int) -> np.ndarray:
    return np.kron(grid_values, np.ones((patch_size, patch_size), dtype=grid_values.dtype))


def selection_mask(ids: List[int], grid: int, patch_size: int) -> np.ndarray:
    cells = np.zeros(grid * grid, dtype=np.uint8)
    cells[np.asarray(ids, dtype=np.int64)] = 255
    return upscale(cells.reshape(grid, grid), patch_size)


def render(model: MPFGVC, pixels: np.ndarray, mode: Optional[str] = None) -> Visualization:
    """Aggregated class-token attention, the k patches selected from it and the
    fusion weights S of the visual query over itself and every class prompt.

    S is None when the model carries no text prompts.
    """
    cfg = model.cfg.vit
    images = (pixels / 255.0).astype(get_default_dtype())[None]
    mode = mode or default_eval_mode(model.cfg.train)
    with no_grad():
        logits, enc = model.logits(images, mode)
        e_t = model.text_embeddings()
        fused = model.fusion_state(enc.e_v, e_t, "vlfm") if e_t is not None else None
    scores = aggregate_head_attention(enc.record)[0]
    ids = [int(i) for i in enc.selected_ids[0]]
    grid = cfg.grid
    heat = upscale(normalize_u8(scores).reshape(grid, grid), cfg.patch_size)
    return Visualization(
        heatmap=heat,
        mask=selection_mask(ids, grid, cfg.patch_size),
        selected_ids=ids,
        attention=[float(s) for s in scores],
        fusion_weights=None if fused is None else [float(s) for s in fused.S.data[0]],
        fusion_rows=None if fused is None else ["visual", *model.class_names],
        prediction=model.class_names[int(np.argmax(logits.data[0]))],
    )


def visualize(
    image_path: os.PathLike | str,
    checkpoint: os.PathLike | str,
    out_dir: os.PathLike | str,
) -> List[Path]:
    """Write ``<stem>_heatmap.pgm``, ``<stem>_mask.pgm`` and ``<stem>_selection.json``."""
    image_path, checkpoint = Path(image_path), Path(checkpoint)
    for path in (image_path, checkpoint):
        if not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, meta = read_checkpoint(checkpoint)
    with precision(meta.get("config", {}).get("precision", "float32")):
        model, _ = model_from_checkpoint(checkpoint)
        cfg = model.cfg.vit
        pixels = read_image(image_path, cfg.image_side, cfg.channels)
        vis = render(model, pixels)
    stem = image_path.stem
    heat_path = out / f"{stem}_heatmap.pgm"
    mask_path = out / f"{stem}_mask.pgm"
    json_path = out / f"{stem}_selection.json"
    Image.fromarray(vis.heatmap).save(heat_path, format="PPM")
    Image.fromarray(vis.mask).save(mask_path, format="PPM")
    payload = dict(vis.as_dict(), image=str(image_path), checkpoint=str(checkpoint))
    json_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    _LOGGER.info("selected patches %s for %s", vis.selected_ids, image_path)
    return [heat_path, mask_path, json_path]
