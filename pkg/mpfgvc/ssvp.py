"""Parameter-free top-k token reselection driven by class-token attention.

``ssvp`` sums the heads and keeps the k highest-scoring patches. ``rollout``
and ``vote`` are simplified stand-ins for two other part-selection schemes,
used only by the vision-prompt comparison table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import concat, gather_rows
from .vit import AttentionRecord, TokenSequence

_LOGGER = logging.getLogger(__name__)


@dataclass
class SelectionResult:
    ids: np.ndarray  # [k] or [B, k], descending score
    scores: Optional[np.ndarray]  # [N] or [B, N]


def aggregate_head_attention(A: Union[AttentionRecord, np.ndarray]) -> np.ndarray:
    """Sum over heads: [..., M, N] -> [..., N]."""
    arr = A.A if isinstance(A, AttentionRecord) else np.asarray(A)
    return arr.sum(axis=-2)


def topk_indices(scores: np.ndarray, k: int) -> SelectionResult:
    """Indices of the k largest scores, descending; ties go to the smaller index."""
    scores = np.asarray(scores)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} outside [1, {n}]")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return SelectionResult(ids=order[..., :k].astype(np.int64), scores=scores)


def reassemble_sequence(seq: TokenSequence, sel: SelectionResult) -> TokenSequence:
    """[class, patch_id(1), ..., patch_id(k)] from a full sequence."""
    if not seq.includes_class:
        raise ContractError("reassembly needs the class token at position 0")
    tokens = seq.tokens
    batch, length, _ = tokens.shape
    n = length - 1
    ids = np.asarray(sel.ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = np.broadcast_to(ids, (batch, ids.shape[0]))
    if ids.shape[0] != batch:
        raise ContractError(f"{ids.shape[0]} id rows for a batch of {batch}")
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"selected index outside [0, {n})")
    picked = gather_rows(tokens[:, 1:, :], np.ascontiguousarray(ids))
    out = concat([tokens[:, :1, :], picked], axis=1)
    return TokenSequence(out, seq.layer_index, includes_class=True)


def rollout_scores(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Class-row of the product of head-averaged attention over layers.

    Each map is [B, M, n, n]; a residual identity is mixed in and rows are
    renormalised before multiplying.
    """
    joint = None
    for probs in maps:
        a = probs.mean(axis=1)
        eye = np.eye(a.shape[-1], dtype=a.dtype)
        a = 0.5 * a + 0.5 * eye
        a = a / a.sum(axis=-1, keepdims=True)
        joint = a if joint is None else a @ joint
    if joint is None:
        raise ContractError("rollout needs at least one attention map")
    return joint[:, 0, 1:]


def rollout_select(maps: Sequence[np.ndarray], k: int) -> SelectionResult:
    return topk_indices(rollout_scores(maps), k)


def vote_select(A: Union[AttentionRecord, np.ndarray], k: int) -> SelectionResult:
    """Each head votes for its own top-k; most votes win.

    Ties fall back to the summed attention, then to the smaller index.
    """
    arr = A.A if isinstance(A, AttentionRecord) else np.asarray(A)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    batch, heads, n = arr.shape
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} outside [1, {n}]")
    per_head = np.argsort(-arr, axis=-1, kind="stable")[..., :k]
    votes = np.zeros((batch, n), dtype=np.int64)
    for b in range(batch):
        np.add.at(votes[b], per_head[b].reshape(-1), 1)
    agg = arr.sum(axis=1)
    index = np.arange(n)
    ids = np.stack(
        [np.lexsort((index, -agg[b], -votes[b]))[:k] for b in range(batch)]
    ).astype(np.int64)
    if squeeze:
        return SelectionResult(ids=ids[0], scores=votes[0].astype(arr.dtype))
    return SelectionResult(ids=ids, scores=votes.astype(arr.dtype))


def select(
    selector: str, record: AttentionRecord, maps: List[np.ndarray], k: int
) -> SelectionResult:
    if selector == "ssvp":
        return topk_indices(aggregate_head_attention(record), k)
    if selector == "rollout":
        return rollout_select(maps, k)
    if selector == "vote":
        return vote_select(record, k)
    raise ConfigError(f"unknown selector '{selector}'")


def hit_rate(
    ids: Iterable[int],
    truth: Iterable[int],
    k: Optional[int] = None,
    s: Optional[int] = None,
) -> float:
    """|ids & truth| / min(k, s)."""
    ids, truth = [int(i) for i in ids], [int(t) for t in truth]
    k = len(ids) if k is None else k
    s = len(truth) if s is None else s
    denom = min(k, s)
    if denom <= 0:
        return 0.0
    return len(set(ids) & set(truth)) / denom
