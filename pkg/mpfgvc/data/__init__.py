"""Synthetic dataset generation and the directory loader."""

from .loader import (
    DatasetMeta,
    Split,
    iterate_batches,
    load_dataset,
    load_split,
    nearest_class_mean_accuracy,
    permutation,
    read_image,
    read_meta,
)
from .synth import generate_dataset, load_preset, render_image

__all__ = [
    "DatasetMeta",
    "Split",
    "generate_dataset",
    "iterate_batches",
    "load_dataset",
    "load_preset",
    "load_split",
    "nearest_class_mean_accuracy",
    "permutation",
    "read_image",
    "read_meta",
    "render_image",
]
