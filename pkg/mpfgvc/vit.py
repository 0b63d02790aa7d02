"""Image encoder: patch embedding, class token, pre-norm transformer layers.

The layer chosen by ``ssvp_layer`` exposes the class-token attention over
patch tokens; the remaining layers run on the reselected sequence
``[class, patch_id(1), ..., patch_id(k)]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .config import ViTConfig
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module, TransformerLayer
from .tensor import Parameter, Tensor, concat, trunc_normal

_LOGGER = logging.getLogger(__name__)


@dataclass
class TokenSequence:
    tokens: Tensor  # [B, n_tokens, D]
    layer_index: int
    includes_class: bool = True

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


@dataclass
class AttentionRecord:
    """Post-softmax class-token attention over patch tokens, [B, M, N]."""

    A: np.ndarray
    layer_index: int


@dataclass
class ImageEncoding:
    e_v: Tensor  # [B, D]
    record: AttentionRecord
    selected_ids: np.ndarray  # [B, k]; computed even when selection is not applied
    final_input_length: int
    ssvp_applied: bool = True
    attention_maps: List[np.ndarray] = field(default_factory=list)


class VisionTransformer(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.dim, rng)
        self.class_token = Parameter(trunc_normal(rng, (1, 1, cfg.dim)))
        self.pos_embed = Parameter(trunc_normal(rng, (1, cfg.num_patches + 1, cfg.dim)))
        self.layers = [
            TransformerLayer(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.depth)
        ]
        self.ln_post = LayerNorm(cfg.dim)

    def forward(self, images: np.ndarray, **kwargs) -> ImageEncoding:
        return encode_image(images, self, **kwargs)


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """[B, H, W, ch] -> [B, N, P*P*ch], patches in row-major grid order."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ConfigError(f"expected images [B, H, W, ch], got shape {images.shape}")
    batch, height, width, channels = images.shape
    if height != width or height != cfg.image_side:
        raise ConfigError(f"image {height}x{width} does not match image_side {cfg.image_side}")
    if height % cfg.patch_size:
        raise ConfigError(f"image side {height} not divisible by patch size {cfg.patch_size}")
    if channels != cfg.channels:
        raise ConfigError(f"image has {channels} channels, config expects {cfg.channels}")
    g, p = cfg.grid, cfg.patch_size
    x = images.reshape(batch, g, p, g, p, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(batch, g * g, p * p * channels)


def patchify_and_embed(images: np.ndarray, cfg: ViTConfig, vit: VisionTransformer) -> TokenSequence:
    patches = Tensor(patchify(images, cfg))
    batch = patches.shape[0]
    emb = vit.patch_embed(patches)
    cls = vit.class_token.broadcast_to((batch, 1, cfg.dim))
    tokens = concat([cls, emb], axis=1) + vit.pos_embed
    return TokenSequence(tokens, layer_index=0, includes_class=True)


def transformer_layer(
    seq: TokenSequence, layer: TransformerLayer, capture_attention: bool = False
) -> Tuple[TokenSequence, Optional[AttentionRecord], np.ndarray]:
    """Apply one layer; optionally return the class row of its attention."""
    out, probs = layer(seq.tokens)
    index = seq.layer_index + 1
    record = None
    if capture_attention:
        if not seq.includes_class:
            raise ConfigError("attention capture needs a class token at position 0")
        record = AttentionRecord(A=probs[:, :, 0, 1:].copy(), layer_index=index)
    return TokenSequence(out, index, seq.includes_class), record, probs


def encode_image(
    images: np.ndarray,
    vit: VisionTransformer,
    *,
    use_ssvp: Optional[bool] = None,
    selector: Optional[str] = None,
    selected_ids: Optional[np.ndarray] = None,
) -> ImageEncoding:
    """Run the encoder; E_V is the final class token after ``ln_post``.

    With selection on, layers after ``ssvp_layer`` see ``k + 1`` tokens.
    ``selected_ids`` pins the selection instead of computing it.
    """
    from . import ssvp

    cfg = vit.cfg
    use_ssvp = cfg.use_ssvp if use_ssvp is None else use_ssvp
    selector = selector or cfg.selector
    if cfg.k > cfg.num_patches:
        raise ConfigError(f"k={cfg.k} exceeds N={cfg.num_patches}")

    seq = patchify_and_embed(images, cfg, vit)
    maps: List[np.ndarray] = []
    record: Optional[AttentionRecord] = None
    ids: Optional[np.ndarray] = None
    for i, layer in enumerate(vit.layers, start=1):
        capture = i == cfg.ssvp_layer
        seq, rec, probs = transformer_layer(seq, layer, capture_attention=capture)
        if i <= cfg.ssvp_layer:
            maps.append(probs)
        if not capture:
            continue
        record = rec
        if selected_ids is not None:
            ids = np.asarray(selected_ids, dtype=np.int64)
        else:
            ids = ssvp.select(selector, record, maps, cfg.k).ids
        if use_ssvp:
            seq = ssvp.reassemble_sequence(seq, ssvp.SelectionResult(ids, None))
        final_len = seq.length
    e_v = vit.ln_post(seq.tokens[:, 0, :])
    if ids is not None and ids.ndim == 1:
        ids = np.broadcast_to(ids, (e_v.shape[0], ids.shape[0]))
    return ImageEncoding(
        e_v=e_v,
        record=record,
        selected_ids=ids,
        ssvp_applied=bool(use_ssvp),
        final_input_length=final_len,
        attention_maps=maps,
    )
