"""Learnable per-class text prompts and the frozen text encoder.

A prompt for class ``c`` is ``[X_c1, ..., X_cJ, class++]`` where ``class++`` is
the word embedding of the supercategory name, shared by every class. The
template variants prepend the frozen phrase "a photo of" or end with the
subcategory name instead.
"""

from __future__ import annotations

import hashlib
import logging
import math
from typing import Dict, List, Sequence

import numpy as np

from .config import TextConfig
from .errors import ConfigError, LabelIndexError
from .nn import LayerNorm, Linear, Module, TransformerLayer
from .tensor import Parameter, Tensor, concat, get_default_dtype, trunc_normal

_LOGGER = logging.getLogger(__name__)

PHOTO_PREFIX = "a photo of"
HANDCRAFTED_PREFIX = "a photo of a"

_WORD_STD = 0.02


class TokenEmbeddingTable:
    """Frozen word -> vector lookup; each vector is derived from (seed, word)."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: Dict[str, np.ndarray] = {}

    def lookup(self, word: str) -> np.ndarray:
        word = word.strip().lower()
        vec = self._cache.get(word)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{word}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.dim) * _WORD_STD
            self._cache[word] = vec
        return vec.astype(get_default_dtype())

    def phrase(self, text: str) -> np.ndarray:
        words = text.split()
        if not words:
            return np.zeros((0, self.dim), dtype=get_default_dtype())
        return np.stack([self.lookup(w) for w in words])

    def name(self, text: str) -> np.ndarray:
        """One vector for a (possibly multi-word) name: mean of its words."""
        return self.phrase(text.replace("_", " ")).mean(axis=0)


class PromptBank(Module):
    def __init__(
        self,
        cfg: TextConfig,
        class_names: Sequence[str],
        supercategory: str,
        table: TokenEmbeddingTable,
        rng: np.random.Generator,
    ):
        if len(class_names) < 1:
            raise ConfigError("prompt bank needs at least one class")
        self.cfg = cfg
        self.template = cfg.template
        self.num_classes = len(class_names)
        self.tokens_per_class = cfg.tokens_per_class
        self.class_names = list(class_names)
        self.supercategory = supercategory
        dim = table.dim
        self.X = Parameter(trunc_normal(rng, (self.num_classes, cfg.tokens_per_class, dim)))
        # handcrafted prompts carry no learnable rows
        self.X.frozen = cfg.template == "handcrafted"
        self.supercat_embedding = table.name(supercategory)
        self.photo_prefix = table.phrase(PHOTO_PREFIX)
        self.handcrafted_prefix = table.phrase(HANDCRAFTED_PREFIX)
        self.name_embeddings = np.stack([table.name(n) for n in class_names])

    @property
    def prompt_length(self) -> int:
        j = self.tokens_per_class
        return {
            "learned_only": j + 1,
            "prefix_photo": len(self.photo_prefix) + j + 1,
            "subcategory_name": len(self.photo_prefix) + j + 1,
            "handcrafted": len(self.handcrafted_prefix) + 1,
        }[self.template]

    def _rows(self, classes: np.ndarray) -> Tensor:
        """Prompts for ``classes`` as [len(classes), prompt_length, D]."""
        count = len(classes)

        def const(arr: np.ndarray) -> Tensor:
            arr = np.asarray(arr)
            return Tensor(np.broadcast_to(arr, (count,) + arr.shape))

        suffix = (
            const(self.supercat_embedding[None])
            if self.template in ("learned_only", "prefix_photo")
            else Tensor(self.name_embeddings[classes][:, None, :])
        )
        if self.template == "handcrafted":
            return concat([const(self.handcrafted_prefix), suffix], axis=1)
        whole = np.array_equal(classes, np.arange(self.num_classes))
        learned = self.X if whole else self.X[classes]
        parts: List[Tensor] = []
        if self.template in ("prefix_photo", "subcategory_name"):
            parts.append(const(self.photo_prefix))
        parts += [learned, suffix]
        return concat(parts, axis=1)

    def build_all(self) -> Tensor:
        return self._rows(np.arange(self.num_classes))


def build_prompt(c: int, bank: PromptBank) -> Tensor:
    """Prompt sequence for class ``c``: [(J+1) x D] in the default template."""
    if not 0 <= c < bank.num_classes:
        raise LabelIndexError(f"class {c} outside [0, {bank.num_classes})")
    return bank._rows(np.array([c]))[0]


class TextEncoder(Module):
    """Causal transformer pooled at the final position; frozen after init."""

    def __init__(self, cfg: TextConfig, dim: int, rng: np.random.Generator):
        self.cfg = cfg
        std = 1.0 / math.sqrt(dim)
        self.pos_embed = Parameter(trunc_normal(rng, (cfg.context_length, dim), 0.01))
        self.layers = [
            TransformerLayer(dim, cfg.heads, 4, rng, causal=True, std=std)
            for _ in range(cfg.depth)
        ]
        self.ln_final = LayerNorm(dim)
        self.proj = Linear(dim, dim, rng, bias=False, std=std)
        self.freeze()

    def forward(self, prompts: Tensor) -> Tensor:
        length = prompts.shape[1]
        if length > self.cfg.context_length:
            raise ConfigError(
                f"prompt length {length} exceeds context length {self.cfg.context_length}"
            )
        x = prompts + self.pos_embed[:length]
        for layer in self.layers:
            x, _ = layer(x)
        x = self.ln_final(x[:, length - 1, :])
        return self.proj(x)


def encode_text(bank: PromptBank, encoder: TextEncoder) -> Tensor:
    """E_T [C x D]: row c is the encoded prompt of class c."""
    return encoder(bank.build_all())
