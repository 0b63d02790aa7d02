"""Loss functions for both training stages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, LabelIndexError
from .tensor import ArrayLike, Tensor, as_tensor, cross_entropy, log_softmax

DEFAULT_TAU = 0.07


def _unit_rows(x: Tensor, what: str) -> Tensor:
    norms = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=-1))
    if np.any(norms == 0):
        raise DegenerateInputError(f"zero-norm row in {what}")
    return x / (x * x).sum(axis=-1, keepdims=True).sqrt()


def cosine_matrix(V: ArrayLike, T: ArrayLike) -> Tensor:
    """cos(V_i, T_j) for every pair: [B, D] x [C, D] -> [B, C]."""
    V, T = as_tensor(V), as_tensor(T)
    if V.ndim != 2 or T.ndim != 2 or V.shape[1] != T.shape[1]:
        raise DimensionError(f"cosine_matrix needs [B, D] and [C, D], got {V.shape}, {T.shape}")
    return _unit_rows(V, "V") @ _unit_rows(T, "T").T


def _diagonal_nll(logits: Tensor) -> Tensor:
    n = logits.shape[0]
    logp = log_softmax(logits, axis=-1)
    return -logp[(np.arange(n), np.arange(n))].mean()


def loss_i2t_pairs(V: ArrayLike, T: ArrayLike) -> Tensor:
    """Image-to-text contrastive loss over matched pairs, no temperature."""
    V, T = as_tensor(V), as_tensor(T)
    if V.shape != T.shape:
        raise DimensionError(f"pair batch needs equal shapes, got {V.shape}, {T.shape}")
    return _diagonal_nll(cosine_matrix(V, T))


def loss_t2i_pairs(V: ArrayLike, T: ArrayLike) -> Tensor:
    """Text-to-image counterpart: softmax runs over the images."""
    V, T = as_tensor(V), as_tensor(T)
    if V.shape != T.shape:
        raise DimensionError(f"pair batch needs equal shapes, got {V.shape}, {T.shape}")
    return _diagonal_nll(cosine_matrix(T, V))


@dataclass
class BatchEmbeddings:
    V: Tensor  # [B, D]
    T_class: Optional[Tensor]  # [C, D]; None when text prompts are off
    labels: np.ndarray  # [B]
    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.V.shape[0] < 1:
            raise ConfigError("batch must hold at least one embedding")
        if self.labels.shape[0] != self.V.shape[0]:
            raise DimensionError(f"{self.labels.shape[0]} labels for {self.V.shape[0]} embeddings")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.T_class is not None:
            classes = self.T_class.shape[0]
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= classes):
                raise LabelIndexError(f"label outside [0, {classes})")


@dataclass
class LossTerms:
    total: Tensor
    L_v: Optional[float] = None
    L_i2t: Optional[float] = None
    L_vlfm: Optional[float] = None

    def as_row(self) -> Dict[str, Optional[float]]:
        return {
            "L_v": self.L_v,
            "L_i2t": self.L_i2t,
            "L_vlfm": self.L_vlfm,
            "L_stage": self.total.item(),
        }


def loss_v(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    return cross_entropy(logits, labels)


def loss_i2t_class(be: BatchEmbeddings) -> Tensor:
    """Temperature-scaled contrast of each image against all C class texts."""
    if be.T_class is None:
        raise ConfigError("loss_i2t_class needs class text embeddings")
    if be.T_class.shape[0] < 2:
        raise DimensionError("loss_i2t_class needs C >= 2")
    return cross_entropy(cosine_matrix(be.V, be.T_class) * (1.0 / be.tau), be.labels)


def stage1_loss(be: BatchEmbeddings, head1_logits: ArrayLike) -> LossTerms:
    """L_v + L_i2t; the text term drops out when prompts are disabled."""
    lv = loss_v(head1_logits, be.labels)
    if be.T_class is None:
        return LossTerms(total=lv, L_v=lv.item())
    li2t = loss_i2t_class(be)
    return LossTerms(total=lv + li2t, L_v=lv.item(), L_i2t=li2t.item())


def stage2_loss(logits2: ArrayLike, labels: np.ndarray) -> LossTerms:
    lv = cross_entropy(logits2, labels)
    return LossTerms(total=lv, L_vlfm=lv.item())


def one_stage_loss(
    be: BatchEmbeddings, head1_logits: ArrayLike, logits2: Optional[ArrayLike]
) -> LossTerms:
    """Unweighted sum of both stages' terms for joint training."""
    first = stage1_loss(be, head1_logits)
    if logits2 is None:
        return first
    lf = cross_entropy(logits2, be.labels)
    return LossTerms(
        total=first.total + lf, L_v=first.L_v, L_i2t=first.L_i2t, L_vlfm=lf.item()
    )
