"""Two-stage optimisation, the one-stage alternative, and evaluation.

Stage 1 trains the image encoder, the prompt rows and head1 on L_v + L_i2t.
Stage 2 freezes all of that and trains only the fusion block on its own
cross-entropy. The text encoder never trains.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from .config import TrainConfig
from .data.loader import Split, iterate_batches
from .errors import ConfigError, NumericError
from .events import EventHub
from .model import MPFGVC, checkpoint_meta, load_checkpoint, mark_trained, save_checkpoint
from .objectives import BatchEmbeddings, LossTerms, one_stage_loss, stage1_loss, stage2_loss
from .optim import SGD, LrSchedule, clip_grad_norm
from .ssvp import hit_rate
from .tensor import no_grad

_LOGGER = logging.getLogger(__name__)

# Published schedules, kept as metadata; desk runs use the first row's shape.
PUBLISHED_SCHEDULES: Dict[str, Dict[str, float]] = {
    name: {"stage1_lr": lr1, "stage1_epochs": e1, "stage2_lr": lr2, "stage2_epochs": e2}
    for name, lr1, e1, lr2, e2 in [
        ("CUB-200-2011", 3e-2, 30, 1e-3, 10),
        ("Stanford Dogs", 3e-3, 30, 1e-4, 10),
        ("NABirds", 3e-2, 10, 1e-3, 3),
        ("Food101", 3e-2, 10, 1e-3, 3),
    ]
}
PUBLISHED_REFERENCE: Dict[str, float] = {
    "CUB-200-2011": 91.8,
    "Stanford Dogs": 91.0,
    "NABirds": 91.0,
    "Food101": 93.0,
}

EVAL_MODES = ("head1", "similarity", "vlfm", "self_attention")


@dataclass
class TrainResult:
    stage: str
    steps: int = 0
    epoch_loss: List[float] = field(default_factory=list)
    epoch_acc: List[float] = field(default_factory=list)
    first_loss: Optional[float] = None
    last_loss: Optional[float] = None
    checkpoint: Optional[str] = None

    @property
    def train_acc(self) -> Optional[float]:
        return self.epoch_acc[-1] if self.epoch_acc else None


@dataclass
class EvalResult:
    top1: float
    per_class: List[Optional[float]]
    n: int
    mode: str
    hit_rate: Optional[float] = None

    def as_dict(self) -> Dict[str, Any]:
        return {
            "top1": self.top1,
            "per_class": self.per_class,
            "n": self.n,
            "mode": self.mode,
            "hit_rate": self.hit_rate,
        }


def default_eval_mode(cfg: TrainConfig) -> str:
    return {"vlfm": "vlfm", "self_attention": "self_attention", "similarity": "similarity"}.get(
        cfg.fusion_mode, "head1"
    )


def _hub(hub: Optional[EventHub]) -> EventHub:
    return hub if hub is not None else EventHub()


def _check_finite(terms: LossTerms, hub: EventHub, **where: Any) -> None:
    value = terms.total.item()
    if math.isfinite(value):
        return
    diagnostics = dict(where, **terms.as_row())
    hub.emit(event="nan_abort", **diagnostics)
    _LOGGER.error("non-finite loss %s at %s", value, where)
    raise NumericError(
        f"non-finite loss at stage {where.get('stage')} step {where.get('step')}",
        diagnostics,
    )


def _run_loop(
    model: MPFGVC,
    data: Split,
    cfg: TrainConfig,
    *,
    stage: str,
    lr_max: float,
    epochs: int,
    compute,
    hub: EventHub,
) -> TrainResult:
    """Shared SGD + cosine loop; ``compute(images, labels)`` -> (LossTerms, logits)."""
    if len(data) == 0:
        raise ConfigError("training split is empty")
    result = TrainResult(stage=stage)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = max(1, epochs * steps_per_epoch)
    warmup = int(cfg.warmup_fraction * total)
    schedule = LrSchedule(lr_max=lr_max, total_steps=total, warmup_steps=warmup)
    params = model.parameters()
    trainable = [p for p in params if not p.frozen]
    opt = SGD(params, momentum=cfg.momentum)
    _LOGGER.info(
        "stage %s: %d trainable tensors, %d epochs x %d steps, lr_max=%g, warmup=%d",
        stage, len(trainable), epochs, steps_per_epoch, lr_max, warmup,
    )
    step = 0
    for epoch in range(epochs):
        hub.emit(event="epoch_start", stage=stage, epoch=epoch)
        losses, correct, seen = [], 0, 0
        batches = iterate_batches(data, cfg.batch_size, seed=cfg.seed, epoch=epoch, hflip=cfg.hflip)
        for images, labels, _ in tqdm(
            batches, total=steps_per_epoch, desc=f"stage {stage} epoch {epoch}",
            disable=not cfg.progress, leave=False,
        ):
            terms, logits = compute(images, labels)
            lr = schedule(step)
            _check_finite(terms, hub, stage=stage, step=step, epoch=epoch, lr=lr)
            terms.total.backward()
            clip_grad_norm(trainable, cfg.max_grad_norm)
            opt.step(lr)
            loss = terms.total.item()
            if result.first_loss is None:
                result.first_loss = loss
            losses.append(loss)
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == labels))
            seen += len(labels)
            hub.emit(event="step", stage=stage, step=step, epoch=epoch, lr=lr, **terms.as_row())
            step += 1
        mean_loss = float(np.mean(losses))
        acc = correct / seen
        result.epoch_loss.append(mean_loss)
        result.epoch_acc.append(acc)
        result.last_loss = losses[-1]
        hub.emit(event="epoch_end", stage=stage, epoch=epoch, mean_loss=mean_loss, train_acc=acc)
        _LOGGER.info("stage %s epoch %d loss %.4f acc %.3f", stage, epoch, mean_loss, acc)
    result.steps = step
    hub.emit(event="stage_end", stage=stage, steps=step, train_acc=result.train_acc)
    return result


def _save(
    model: MPFGVC, stage: str, path: Optional[os.PathLike], hub: EventHub, result: TrainResult
) -> None:
    mark_trained(model, stage)
    if path is None:
        return
    saved = save_checkpoint(model, path, checkpoint_meta(model, stage, steps=result.steps))
    result.checkpoint = str(saved)
    hub.emit(event="checkpoint_saved", stage=stage, path=str(saved))


def train_stage1(
    model: MPFGVC,
    data: Split,
    cfg: TrainConfig,
    *,
    hub: Optional[EventHub] = None,
    checkpoint_path: Optional[os.PathLike] = None,
) -> TrainResult:
    hub = _hub(hub)
    model.set_stage("1")

    def compute(images, labels):
        enc = model.encode(images)
        logits1 = model.head1_logits(enc.e_v)
        be = BatchEmbeddings(enc.e_v, model.text_embeddings(), labels, cfg.tau)
        return stage1_loss(be, logits1), logits1

    result = _run_loop(
        model, data, cfg, stage="1", lr_max=cfg.stage1_lr,
        epochs=cfg.stage1_epochs, compute=compute, hub=hub,
    )
    _save(model, "1", checkpoint_path, hub, result)
    return result


def train_stage2(
    model: MPFGVC,
    data: Split,
    cfg: TrainConfig,
    *,
    checkpoint: Optional[os.PathLike] = None,
    hub: Optional[EventHub] = None,
    checkpoint_path: Optional[os.PathLike] = None,
) -> TrainResult:
    """Train the fusion block on top of a frozen stage-1 model."""
    hub = _hub(hub)
    if checkpoint is not None:
        meta = load_checkpoint(model, checkpoint)
        mark_trained(model, str(meta.get("stage", "")))
    if "1" not in model.trained_stages:
        raise ConfigError("stage 2 needs a stage-1 checkpoint (run `train --stage 1` first)")
    mode = cfg.fusion_mode
    if mode in ("similarity", "none"):
        _LOGGER.info("fusion mode '%s' has nothing to train in stage 2", mode)
        result = TrainResult(stage="2")
        _save(model, "2", checkpoint_path, hub, result)
        return result
    model.set_stage("2")
    with no_grad():
        e_t = model.text_embeddings() if mode == "vlfm" else None

    def compute(images, labels):
        with no_grad():
            e_v = model.encode(images).e_v
        state = model.fusion_state(e_v, e_t, mode)
        return stage2_loss(state.logits, labels), state.logits

    result = _run_loop(
        model, data, cfg, stage="2", lr_max=cfg.stage2_lr,
        epochs=cfg.stage2_epochs, compute=compute, hub=hub,
    )
    _save(model, "2", checkpoint_path, hub, result)
    return result


def train_one_stage(
    model: MPFGVC,
    data: Split,
    cfg: TrainConfig,
    *,
    hub: Optional[EventHub] = None,
    checkpoint_path: Optional[os.PathLike] = None,
) -> TrainResult:
    """Joint training of encoder, prompts and fusion block in one phase."""
    hub = _hub(hub)
    model.set_stage("one")
    mode = cfg.fusion_mode
    fusing = mode in ("vlfm", "self_attention")
    if not fusing:
        model.fusion.freeze()

    def compute(images, labels):
        enc = model.encode(images)
        logits1 = model.head1_logits(enc.e_v)
        e_t = model.text_embeddings()
        be = BatchEmbeddings(enc.e_v, e_t, labels, cfg.tau)
        logits2 = None
        if fusing:
            logits2 = model.fusion_state(enc.e_v, e_t if mode == "vlfm" else None, mode).logits
        return one_stage_loss(be, logits1, logits2), logits2 if logits2 is not None else logits1

    result = _run_loop(
        model, data, cfg, stage="one", lr_max=cfg.stage1_lr,
        epochs=cfg.stage1_epochs, compute=compute, hub=hub,
    )
    _save(model, "one", checkpoint_path, hub, result)
    return result


def evaluate(
    model: MPFGVC,
    data: Split,
    mode: str = "vlfm",
    *,
    batch_size: int = 64,
    hub: Optional[EventHub] = None,
) -> EvalResult:
    """Top-1 accuracy, per-class accuracy and mean selection hit-rate."""
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode '{mode}' (expected {EVAL_MODES})")
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    preds, hits = [], []
    with no_grad():
        for images, labels, idx in iterate_batches(data, batch_size):
            logits, enc = model.logits(images, mode)
            preds.append(np.argmax(logits.data, axis=-1))
            for row, i in enumerate(idx):
                truth = data.patch_coords[i]
                if truth:
                    hits.append(hit_rate(enc.selected_ids[row], truth))
    pred = np.concatenate(preds)
    correct = pred == data.labels
    per_class: List[Optional[float]] = []
    for c in range(model.num_classes):
        mask = data.labels == c
        per_class.append(float(np.mean(correct[mask])) if mask.any() else None)
    result = EvalResult(
        top1=float(np.mean(correct)),
        per_class=per_class,
        n=len(data),
        mode=mode,
        hit_rate=float(np.mean(hits)) if hits else None,
    )
    _hub(hub).emit(event="eval", split=data.name, **result.as_dict())
    return result
