"""Vision-language fusion: one visual query attends over [E_V; E_T].

The attended value mix goes through a 4x expansion translation block and the
stage-2 classifier head.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import Linear, Module
from .objectives import cosine_matrix
from .tensor import ArrayLike, Tensor, as_tensor, concat, gelu, softmax

_LOGGER = logging.getLogger(__name__)

EXPANSION = 4


class VisionLanguageFusion(Module):
    """Wq/Wk/Wv shared across modalities, translate block, head2.

    Weights start at std 1/sqrt(fan_in) so activations stay unit-scale through
    the stacked projections.
    """

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.dim = dim
        self.wq = _fan_in_linear(dim, dim, rng)
        self.wk = _fan_in_linear(dim, dim, rng)
        self.wv = _fan_in_linear(dim, dim, rng)
        self.trans_expand = _fan_in_linear(dim, EXPANSION * dim, rng)
        self.trans_project = _fan_in_linear(EXPANSION * dim, dim, rng)
        self.head2 = _fan_in_linear(dim, num_classes, rng)


def _fan_in_linear(in_features: int, out_features: int, rng: np.random.Generator) -> Linear:
    return Linear(in_features, out_features, rng, std=1.0 / math.sqrt(in_features))


@dataclass
class FusionState:
    S: Optional[Tensor]  # [B, C+1]; None in similarity mode
    e_v_prime: Optional[Tensor]
    e_v_hat: Optional[Tensor]
    logits: Tensor  # [B, C]

    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=-1)


def _as_batch(E_V: ArrayLike) -> Tensor:
    E_V = as_tensor(E_V)
    return E_V.reshape(1, -1) if E_V.ndim == 1 else E_V


def project_qkv(
    E_V: ArrayLike, E_T: Optional[ArrayLike], fp: VisionLanguageFusion
) -> Tuple[Tensor, Tensor, Tensor]:
    """Q0 [B, D] from E_V; K, V [B, C+1, D] from [E_V; E_T] with shared maps."""
    E_V = _as_batch(E_V)
    batch, dim = E_V.shape
    tokens = E_V.reshape(batch, 1, dim)
    if E_T is not None:
        E_T = as_tensor(E_T)
        if E_T.ndim != 2 or E_T.shape[1] != dim:
            raise DimensionError(f"E_T must be [C, {dim}], got {E_T.shape}")
        if E_T.shape[0]:
            text = E_T.reshape(1, E_T.shape[0], dim).broadcast_to((batch, E_T.shape[0], dim))
            tokens = concat([tokens, text], axis=1)
    return fp.wq(E_V), fp.wk(tokens), fp.wv(tokens)


def cross_modal_attention(Q0: Tensor, K: Tensor) -> Tensor:
    """S = softmax(<Q0, K_i> / sqrt(D)) jointly over all C+1 rows."""
    batch, rows, dim = K.shape
    logits = (Q0.reshape(batch, 1, dim) @ K.swapaxes(-1, -2)).reshape(batch, rows)
    return softmax(logits * (1.0 / math.sqrt(dim)), axis=-1)


def fuse(S: Tensor, V: Tensor) -> Tensor:
    """Convex combination sum_i S_i V_i: [B, n] x [B, n, D] -> [B, D]."""
    batch, rows, dim = V.shape
    if S.shape != (batch, rows):
        raise DimensionError(f"S shape {S.shape} does not match values {V.shape}")
    return (S.reshape(batch, 1, rows) @ V).reshape(batch, dim)


def translate(e_v_prime: Tensor, fp: VisionLanguageFusion) -> Tensor:
    return fp.trans_project(gelu(fp.trans_expand(e_v_prime)))


def vlfm_forward(
    E_V: ArrayLike,
    E_T: Optional[ArrayLike],
    fp: VisionLanguageFusion,
    mode: str = "vlfm",
) -> FusionState:
    """Fusion head forward.

    ``self_attention`` drops the textual rows; ``similarity`` skips fusion and
    scores classes by cosine against E_T.
    """
    if mode == "similarity":
        if E_T is None:
            raise ConfigError("similarity mode needs text embeddings")
        logits = cosine_matrix(_as_batch(E_V), E_T)
        return FusionState(S=None, e_v_prime=None, e_v_hat=None, logits=logits)
    if mode == "vlfm":
        if E_T is None:
            raise ConfigError("vlfm mode needs text embeddings")
        text = E_T
    elif mode == "self_attention":
        text = None
    else:
        raise ConfigError(f"fusion mode '{mode}' has no fusion forward")
    Q0, K, V = project_qkv(E_V, text, fp)
    S = cross_modal_attention(Q0, K)
    e_v_prime = fuse(S, V)
    e_v_hat = translate(e_v_prime, fp)
    return FusionState(S=S, e_v_prime=e_v_prime, e_v_hat=e_v_hat, logits=fp.head2(e_v_hat))
