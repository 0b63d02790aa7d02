"""Directory loader for generated (or hand-assembled) datasets."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import ConfigError, FormatError
from ..tensor import get_default_dtype

_LOGGER = logging.getLogger(__name__)

_META_KEYS = ("supercategory_name", "C", "class_names", "image_side", "channels")


@dataclass
class DatasetMeta:
    supercategory_name: str
    C: int
    class_names: List[str]
    image_side: int
    channels: int
    n_train: int = 0
    n_test: int = 0
    patch_size: Optional[int] = None
    discriminative_patch_coords: Dict[str, List[int]] = field(default_factory=dict)
    extra: Dict[str, object] = field(default_factory=dict)


@dataclass
class Split:
    """All images of one split, kept as uint8 to stay bit-exact."""

    name: str
    pixels: np.ndarray  # [n, H, W, ch] uint8
    labels: np.ndarray  # [n] int64
    paths: List[str]
    patch_coords: List[List[int]]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def images(self) -> np.ndarray:
        return self.as_float(np.arange(len(self)))

    def as_float(self, index: np.ndarray) -> np.ndarray:
        return (self.pixels[index] / 255.0).astype(get_default_dtype())


def read_meta(root: os.PathLike | str) -> DatasetMeta:
    path = Path(root) / "meta.json"
    if not path.exists():
        raise FormatError(path, "missing dataset meta")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON ({exc})") from exc
    missing = [k for k in _META_KEYS if k not in raw]
    if missing:
        raise FormatError(path, f"missing keys {missing}")
    if len(raw["class_names"]) != raw["C"]:
        raise FormatError(path, "class_names length does not match C")
    known = {f for f in DatasetMeta.__dataclass_fields__} - {"extra"}
    return DatasetMeta(
        **{k: v for k, v in raw.items() if k in known},
        extra={k: v for k, v in raw.items() if k not in known},
    )


def read_image(path: os.PathLike | str, side: int, channels: int) -> np.ndarray:
    """uint8 pixels [side, side, channels]; anything else is a FormatError."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except (OSError, UnidentifiedImageError) as exc:
        raise FormatError(path, f"unreadable image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.dtype != np.uint8:
        raise FormatError(path, f"expected 8-bit pixels, got {arr.dtype}")
    if arr.shape[0] != side or arr.shape[1] != side:
        raise FormatError(path, f"image is {arr.shape[1]}x{arr.shape[0]}, expected {side}x{side}")
    if arr.shape[2] != channels:
        raise FormatError(path, f"image has {arr.shape[2]} channels, expected {channels}")
    return arr


def load_split(
    root: os.PathLike | str, split: str = "train", meta: Optional[DatasetMeta] = None
) -> Split:
    root = Path(root)
    meta = meta or read_meta(root)
    pixels, labels, paths, coords = [], [], [], []
    for label in range(meta.C):
        folder = root / split / f"class_{label}"
        if not folder.is_dir():
            raise FormatError(folder, "missing class directory")
        files = sorted(
            (p for p in folder.iterdir() if p.suffix in (".ppm", ".pgm")),
            key=lambda p: (len(p.stem), p.stem),
        )
        for path in files:
            rel = f"{split}/class_{label}/{path.name}"
            pixels.append(read_image(path, meta.image_side, meta.channels))
            labels.append(label)
            paths.append(rel)
            coords.append(list(meta.discriminative_patch_coords.get(rel, [])))
    side = meta.image_side
    stacked = (
        np.stack(pixels)
        if pixels
        else np.zeros((0, side, side, meta.channels), dtype=np.uint8)
    )
    return Split(split, stacked, np.asarray(labels, dtype=np.int64), paths, coords)


def permutation(n: int, seed: int, epoch: int = 0) -> np.ndarray:
    """Fixed shuffling order for (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def iterate_batches(
    split: Split,
    batch_size: int,
    *,
    seed: Optional[int] = None,
    epoch: int = 0,
    hflip: bool = False,
) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, labels, indices)``; shuffled when ``seed`` is given."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(split)
    order = np.arange(n) if seed is None else permutation(n, seed, epoch)
    flip_rng = np.random.default_rng([seed or 0, epoch, 3]) if hflip else None
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        images = split.as_float(idx)
        if flip_rng is not None:
            mask = flip_rng.random(len(idx)) < 0.5
            images[mask] = images[mask][:, :, ::-1, :]
        yield images, split.labels[idx], idx


def load_dataset(
    root: os.PathLike | str, split: str = "train", seed: Optional[int] = None
) -> Tuple[Iterator[Tuple[np.ndarray, int]], DatasetMeta]:
    """Stream ``(image in [0, 1], label)`` pairs in a seed-fixed order."""
    meta = read_meta(root)
    data = load_split(root, split, meta)

    def stream() -> Iterator[Tuple[np.ndarray, int]]:
        for images, labels, _ in iterate_batches(data, 1, seed=seed):
            yield images[0], int(labels[0])

    return stream(), meta


def nearest_class_mean_accuracy(train: Split, test: Split) -> float:
    """Accuracy of a nearest-class-mean classifier on raw pixels."""
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("nearest_class_mean_accuracy needs non-empty splits")
    x_train = train.pixels.reshape(len(train), -1).astype(np.float64)
    x_test = test.pixels.reshape(len(test), -1).astype(np.float64)
    classes = np.unique(train.labels)
    means = np.stack([x_train[train.labels == c].mean(axis=0) for c in classes])
    dists = ((x_test[:, None, :] - means[None]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(dists, axis=1)]
    return float(np.mean(pred == test.labels))
