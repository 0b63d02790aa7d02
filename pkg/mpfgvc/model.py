"""Full model bundle, per-stage freezing and the checkpoint file format.

Checkpoint layout (little-endian)::

    b"MPFG" | uint32 header_len | header JSON (utf-8) | raw tensor bytes

The header lists ``records`` of ``{name, shape, dtype, offset, nbytes}`` with
offsets relative to the end of the header, plus free-form ``meta``.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .errors import ConfigError, FormatError
from .nn import Linear, Module
from .tensor import Tensor, no_grad
from .text_prompt import PromptBank, TextEncoder, TokenEmbeddingTable, encode_text
from .vit import ImageEncoding, VisionTransformer, encode_image
from .vlfm import FusionState, VisionLanguageFusion, vlfm_forward

_LOGGER = logging.getLogger(__name__)

MAGIC = b"MPFG"
FORMAT_VERSION = 1
PREDICT_MODES = ("head1", "similarity", "vlfm", "self_attention")


class MPFGVC(Module):
    """Image encoder + prompt bank + frozen text encoder + two heads."""

    def __init__(
        self, cfg: RunConfig, class_names: Sequence[str], supercategory: str = "object"
    ):
        self.cfg = cfg
        self.class_names = list(class_names)
        self.supercategory = supercategory
        self.trained_stages: set = set()
        num_classes = len(self.class_names)
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        dim = cfg.vit.dim
        rng = np.random.default_rng(cfg.train.seed)
        self.image_encoder = VisionTransformer(cfg.vit, rng)
        self.head1 = Linear(dim, num_classes, rng)
        self.prompts = PromptBank(
            cfg.text, self.class_names, supercategory,
            TokenEmbeddingTable(dim, cfg.text.table_seed), rng,
        )
        self.fusion = VisionLanguageFusion(dim, num_classes, rng)
        # same stand-in "pretrained" text tower for every training seed
        text_rng = np.random.default_rng([cfg.text.table_seed, 1])
        self.text_encoder = TextEncoder(cfg.text, dim, text_rng)
        self.name_parameters()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def use_datp(self) -> bool:
        return self.cfg.text.use_datp

    # -- stage scoping ----------------------------------------------------
    def set_stage(self, stage: str) -> None:
        """Freeze everything except what ``stage`` ('1', '2', 'one') trains."""
        if stage not in ("1", "2", "one"):
            raise ConfigError(f"unknown stage '{stage}'")
        self.freeze()
        if stage in ("1", "one"):
            self.image_encoder.unfreeze()
            self.head1.unfreeze()
            if self.use_datp:
                self.prompts.unfreeze()
                self.prompts.X.frozen = self.prompts.template == "handcrafted"
        if stage in ("2", "one"):
            self.fusion.unfreeze()
        self.text_encoder.freeze()

    # -- forward pieces ---------------------------------------------------
    def encode(self, images: np.ndarray, **kwargs: Any) -> ImageEncoding:
        return encode_image(images, self.image_encoder, **kwargs)

    def text_embeddings(self) -> Optional[Tensor]:
        if not self.use_datp:
            return None
        return encode_text(self.prompts, self.text_encoder)

    def head1_logits(self, e_v: Tensor) -> Tensor:
        return self.head1(e_v)

    def fusion_state(
        self, e_v: Tensor, e_t: Optional[Tensor], mode: str = "vlfm"
    ) -> FusionState:
        return vlfm_forward(e_v, e_t, self.fusion, mode)

    def logits(self, images: np.ndarray, mode: str = "vlfm") -> Tuple[Tensor, ImageEncoding]:
        if mode not in PREDICT_MODES:
            raise ConfigError(f"unknown prediction mode '{mode}' (expected {PREDICT_MODES})")
        enc = self.encode(images)
        if mode == "head1":
            return self.head1_logits(enc.e_v), enc
        e_t = self.text_embeddings() if mode != "self_attention" else None
        return self.fusion_state(enc.e_v, e_t, mode).logits, enc

    def predict(self, images: np.ndarray, mode: str = "vlfm") -> np.ndarray:
        with no_grad():
            logits, _ = self.logits(images, mode)
        return np.argmax(logits.data, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: Module, path: os.PathLike | str, meta: Optional[Dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records: List[Dict[str, Any]] = []
    blobs: List[bytes] = []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        records.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": le.dtype.str,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format": FORMAT_VERSION, "records": records, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    _LOGGER.debug("saved %d tensors to %s", len(records), path)
    return path


def read_checkpoint(path: os.PathLike | str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(path, "not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, f"corrupt header ({exc})") from exc
    if header.get("format") != FORMAT_VERSION:
        raise FormatError(path, f"unsupported format {header.get('format')!r}")
    body = raw[8 + header_len :]
    state: Dict[str, np.ndarray] = {}
    for i, rec in enumerate(header.get("records", [])):
        try:
            name, start, nbytes = rec["name"], int(rec["offset"]), int(rec["nbytes"])
            dtype, shape = np.dtype(rec["dtype"]), tuple(rec["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(path, f"malformed tensor record #{i} ({exc!r})") from exc
        if start < 0 or start + nbytes > len(body):
            raise FormatError(path, f"truncated tensor '{name}'")
        try:
            arr = np.frombuffer(body[start : start + nbytes], dtype=dtype).reshape(shape)
        except ValueError as exc:
            raise FormatError(path, f"tensor '{name}' does not match its record ({exc})") from exc
        state[name] = arr.copy()
    return state, header.get("meta", {})


def load_checkpoint(model: Module, path: os.PathLike | str) -> Dict[str, Any]:
    state, meta = read_checkpoint(path)
    try:
        model.load_state_dict(state)
    except FormatError as exc:
        raise FormatError(path, str(exc)) from exc
    return meta


def model_from_checkpoint(path: os.PathLike | str) -> Tuple[MPFGVC, Dict[str, Any]]:
    """Rebuild the model recorded in a checkpoint's meta and load its weights."""
    state, meta = read_checkpoint(path)
    for key in ("config", "class_names", "supercategory"):
        if key not in meta:
            raise FormatError(path, f"meta lacks '{key}'")
    cfg = RunConfig.from_dict(meta["config"])
    model = MPFGVC(cfg, meta["class_names"], meta["supercategory"])
    model.load_state_dict(state)
    mark_trained(model, str(meta.get("stage", "")))
    return model, meta


def mark_trained(model: MPFGVC, stage: str) -> None:
    """Record which stages the weights went through; stage 2 implies stage 1."""
    if stage == "one":
        model.trained_stages.update({"1", "2"})
    elif stage in ("1", "2"):
        model.trained_stages.update({"1", stage})


def checkpoint_meta(model: MPFGVC, stage: str, **extra: Any) -> Dict[str, Any]:
    meta = {
        "stage": stage,
        "config": model.cfg.to_dict(),
        "class_names": model.class_names,
        "supercategory": model.supercategory,
    }
    meta.update(extra)
    return meta
