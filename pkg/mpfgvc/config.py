"""Run configuration: dataclasses validated on construction, loaded from JSON.

A run config file looks like::

    {
      "vit":   {"image_side": 64, "patch_size": 8, "k": 4},
      "text":  {"tokens_per_class": 16},
      "train": {"seed": 0, "stage1_epochs": 30},
      "data_dir": "runs/data",
      "out_dir": "runs/exp1",
      "precision": "float32"
    }

Unknown keys at any level raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from .errors import ConfigError

_LOGGER = logging.getLogger(__name__)

T = TypeVar("T")

SELECTORS = ("ssvp", "rollout", "vote")
TEMPLATES = ("learned_only", "prefix_photo", "handcrafted", "subcategory_name")
FUSION_MODES = ("vlfm", "self_attention", "similarity", "none")
PRECISIONS = ("float32", "float64")

# Reference operating point: 14 tokens kept out of 28x28 patches.
_REF_K, _REF_N = 14, 784
# Object patches per synthetic image in the desk presets.
_MIN_K = 4


def scaled_k(num_patches: int) -> int:
    """Keep the reference k/N ratio at another patch count."""
    return max(1, int(round(_REF_K / _REF_N * num_patches)))


def default_k(num_patches: int) -> int:
    """Default kept-token count: the scaled reference, at least ``_MIN_K``.

    At desk resolution the scaled ratio keeps a single token, fewer than the
    object patches a synthetic image carries.
    """
    return min(num_patches, max(scaled_k(num_patches), _MIN_K))


@dataclass
class ViTConfig:
    image_side: int = 64
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    k: Optional[int] = None
    ssvp_layer: Optional[int] = None
    use_ssvp: bool = True
    selector: str = "ssvp"

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.image_side % self.patch_size:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_size {self.patch_size}"
            )
        if self.dim < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2 (selection needs a layer before the last)")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.selector not in SELECTORS:
            raise ConfigError(f"unknown selector '{self.selector}' (expected {SELECTORS})")
        if self.k is None:
            self.k = default_k(self.num_patches)
        if not 1 <= self.k <= self.num_patches:
            raise ConfigError(f"k={self.k} outside [1, {self.num_patches}]")
        if self.ssvp_layer is None:
            self.ssvp_layer = self.depth - 1
        if not 1 <= self.ssvp_layer <= self.depth - 1:
            raise ConfigError(f"ssvp_layer={self.ssvp_layer} outside [1, {self.depth - 1}]")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class TextConfig:
    depth: int = 4
    heads: int = 4
    context_length: int = 77
    tokens_per_class: int = 16
    template: str = "learned_only"
    use_datp: bool = True
    table_seed: int = 0

    def __post_init__(self) -> None:
        if self.template not in TEMPLATES:
            raise ConfigError(f"unknown template '{self.template}' (expected {TEMPLATES})")
        if self.tokens_per_class < 1:
            raise ConfigError("tokens_per_class must be >= 1")
        if self.depth < 1 or self.heads < 1:
            raise ConfigError("text depth and heads must be >= 1")
        # longest template: "a photo of" + J tokens + class name
        if self.tokens_per_class + 4 > self.context_length:
            raise ConfigError(
                f"tokens_per_class={self.tokens_per_class} exceeds context length "
                f"{self.context_length}"
            )


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    stage1_lr: float = 1e-2
    stage2_lr: float = 1e-2
    stage1_epochs: int = 30
    stage2_epochs: int = 10
    tau: float = 0.07
    momentum: float = 0.9
    warmup_fraction: float = 0.1
    max_grad_norm: Optional[float] = 1.0
    hflip: bool = False
    fusion_mode: str = "vlfm"
    one_stage_mode: bool = False
    progress: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.stage1_lr < 0 or self.stage2_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode '{self.fusion_mode}' (expected {FUSION_MODES})")


@dataclass
class GenerationSpec:
    """Recipe for a synthetic fine-grained dataset."""

    num_classes: int = 8
    n_train: int = 25
    n_test: int = 10
    image_side: int = 64
    patch_size: int = 8
    channels: int = 3
    signal_patches: int = 4
    noise: float = 0.1
    seed: int = 0
    supercategory: str = "bird"

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.patch_size < 1 or self.image_side % self.patch_size:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_size {self.patch_size}"
            )
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if not 1 <= self.signal_patches <= self.num_patches:
            raise ConfigError(
                f"signal_patches={self.signal_patches} outside [1, {self.num_patches}]"
            )
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("n_train must be >= 1 and n_test >= 0")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    text: TextConfig = field(default_factory=TextConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: Optional[str] = None
    out_dir: str = "runs/default"
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if self.train.fusion_mode in ("vlfm", "similarity") and not self.text.use_datp:
            raise ConfigError(f"fusion_mode '{self.train.fusion_mode}' needs text prompts")

    # -- (de)serialisation -------------------------------------------------
    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        _reject_unknown(cls, raw, "")
        kwargs: Dict[str, Any] = {}
        for key, sub in (("vit", ViTConfig), ("text", TextConfig), ("train", TrainConfig)):
            if key in raw:
                kwargs[key] = section_from_dict(sub, raw[key], key)
        for key in ("data_dir", "out_dir", "precision"):
            if key in raw:
                kwargs[key] = raw[key]
        return cls(**kwargs)

    @classmethod
    def load(cls, path: os.PathLike | str) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def save(self, path: os.PathLike | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    def with_overrides(self, **sections: Dict[str, Any]) -> "RunConfig":
        """Copy with section fields replaced, e.g. ``vit={"k": 3}``."""
        raw = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key].update(value)
            else:
                raw[key] = value
        # k/ssvp_layer were resolved from the old geometry; recompute unless given
        vit_over = sections.get("vit") or {}
        for derived in ("k", "ssvp_layer"):
            if derived not in vit_over and any(
                g in vit_over for g in ("image_side", "patch_size", "depth")
            ):
                raw["vit"][derived] = None
        return RunConfig.from_dict(raw)


def _reject_unknown(cls: Type[Any], raw: Any, where: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            path = f"{where}.{key}" if where else key
            raise ConfigError(f"unknown config key '{path}'")


def section_from_dict(cls: Type[T], raw: Dict[str, Any], where: str = "") -> T:
    _reject_unknown(cls, raw, where)
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def worker_count() -> int:
    """Worker cap from MPFGVC_THREADS (default 1)."""
    raw = os.environ.get("MPFGVC_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        _LOGGER.warning("ignoring MPFGVC_THREADS=%r (not an integer)", raw)
        return 1
    return max(1, value)
