"""Synthetic fine-grained dataset: one shared background, per-class patches.

Every image of every class shows the same procedural texture. A class is
only told apart by its pattern, stamped into ``signal_patches`` random grid
cells, plus Gaussian pixel noise. The stamped cell indices are written to
``meta.json`` as ground truth for selection hit-rate.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from ..config import GenerationSpec, section_from_dict
from ..errors import ConfigError

_LOGGER = logging.getLogger(__name__)

BASE_PATH = Path(__file__).parent
PRESETS_PATH = BASE_PATH / "presets"

SPLITS = ("train", "test")
_SPLIT_IDS = {"train": 0, "test": 1}


def load_preset(name: str) -> GenerationSpec:
    """Preset by name (``desk_c8``, ``tiny``) or by path to a JSON file."""
    p = Path(name)
    if p.suffix != ".json":
        p = PRESETS_PATH / f"{name}.json"
    elif not p.is_absolute() and not p.exists():
        p = PRESETS_PATH / p.name
    if not p.exists():
        known = sorted(x.stem for x in PRESETS_PATH.glob("*.json"))
        raise ConfigError(f"unknown preset '{name}'. Valid: {', '.join(known)}")
    with open(p, "r", encoding="utf-8") as f:
        return section_from_dict(GenerationSpec, json.load(f), p.stem)


def class_names(spec: GenerationSpec) -> List[str]:
    return [f"species{i}" for i in range(spec.num_classes)]


def image_suffix(channels: int) -> str:
    return ".ppm" if channels == 3 else ".pgm"


def background(spec: GenerationSpec) -> np.ndarray:
    """Shared texture in [0.3, 0.7], shape [side, side, channels]."""
    rng = np.random.default_rng([spec.seed, 7])
    side = spec.image_side
    yy, xx = np.mgrid[0:side, 0:side] / side
    layers = []
    for _ in range(spec.channels):
        fx, fy = rng.uniform(1.0, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        layers.append(0.5 + 0.2 * wave)
    return np.stack(layers, axis=-1)


def class_patterns(spec: GenerationSpec) -> np.ndarray:
    """[C, P, P, channels] patterns with values 0.5 +- 0.4."""
    rng = np.random.default_rng([spec.seed, 11])
    p = spec.patch_size
    signs = rng.choice([-1.0, 1.0], size=(spec.num_classes, p, p, spec.channels))
    return 0.5 + 0.4 * signs


def render_image(
    spec: GenerationSpec,
    split: str,
    label: int,
    index: int,
    *,
    bg: Optional[np.ndarray] = None,
    patterns: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, List[int]]:
    """One uint8 image and its stamped patch indices; pure in its arguments."""
    bg = background(spec) if bg is None else bg
    patterns = class_patterns(spec) if patterns is None else patterns
    rng = np.random.default_rng([spec.seed, _SPLIT_IDS[split], label, index])
    grid, p = spec.image_side // spec.patch_size, spec.patch_size
    cells = sorted(int(c) for c in rng.choice(grid * grid, size=spec.signal_patches, replace=False))
    img = bg.copy()
    for cell in cells:
        r, c = divmod(cell, grid)
        img[r * p : (r + 1) * p, c * p : (c + 1) * p] = patterns[label]
    if spec.noise > 0:
        img = img + spec.noise * rng.standard_normal(img.shape)
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, cells


def save_image(pixels: np.ndarray, path: os.PathLike | str) -> None:
    arr = pixels[..., 0] if pixels.shape[-1] == 1 else pixels
    Image.fromarray(arr).save(path, format="PPM")


def generate_dataset(spec: GenerationSpec, root: os.PathLike | str) -> Dict[str, object]:
    """Write ``root/{train,test}/class_<i>/img_<j>.ppm`` and ``root/meta.json``."""
    root = Path(root)
    bg, patterns = background(spec), class_patterns(spec)
    suffix = image_suffix(spec.channels)
    coords: Dict[str, List[int]] = {}
    counts = {"train": spec.n_train, "test": spec.n_test}
    for split in SPLITS:
        for label in range(spec.num_classes):
            folder = root / split / f"class_{label}"
            folder.mkdir(parents=True, exist_ok=True)
            for j in range(counts[split]):
                pixels, cells = render_image(spec, split, label, j, bg=bg, patterns=patterns)
                rel = f"{split}/class_{label}/img_{j}{suffix}"
                save_image(pixels, root / rel)
                coords[rel] = cells
    meta = {
        "supercategory_name": spec.supercategory,
        "C": spec.num_classes,
        "class_names": class_names(spec),
        "n_train": spec.n_train,
        "n_test": spec.n_test,
        "image_side": spec.image_side,
        "channels": spec.channels,
        "patch_size": spec.patch_size,
        "signal_patches": spec.signal_patches,
        "noise": spec.noise,
        "seed": spec.seed,
        "discriminative_patch_coords": coords,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    _LOGGER.info(
        "generated %d train + %d test images in %s",
        spec.n_train * spec.num_classes,
        spec.n_test * spec.num_classes,
        root,
    )
    return meta
