"""Finite-difference gradient suite.

Each registered case builds a scalar loss from freshly sampled float64
inputs and compares :meth:`Tensor.backward` against central differences.
Large parameter tensors are probed at a few random coordinates only.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, TextConfig, ViTConfig
from .errors import ConfigError
from .events import EventHub
from .model import MPFGVC
from .nn import Linear, MultiHeadSelfAttention, TransformerLayer
from .objectives import (
    BatchEmbeddings,
    cosine_matrix,
    loss_i2t_class,
    loss_i2t_pairs,
    loss_t2i_pairs,
    stage1_loss,
    stage2_loss,
)
from .tensor import (
    Tensor,
    concat,
    cosine_similarity,
    cross_entropy,
    finite_diff_grad,
    gather_rows,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    precision,
    softmax,
)
from .text_prompt import PromptBank, TextEncoder, TokenEmbeddingTable, encode_text
from .vit import VisionTransformer, encode_image
from .vlfm import VisionLanguageFusion, vlfm_forward

_LOGGER = logging.getLogger(__name__)

THRESHOLD = 1e-4
DEFAULT_SEEDS = tuple(range(10))
STEP = 1e-5
MAX_COORDS = 6  # per tensor, for cases marked ``sampled``

LossFn = Callable[[], Tensor]
Builder = Callable[[np.random.Generator], Tuple[LossFn, List[Tensor]]]


@dataclass
class GradCase:
    name: str
    build: Builder
    sampled: bool = False


CASES: Dict[str, GradCase] = {}


def _case(name: str, sampled: bool = False):
    def wrap(fn: Builder) -> Builder:
        CASES[name] = GradCase(name, fn, sampled)
        return fn

    return wrap


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(
    loss_fn: LossFn,
    wrt: Sequence[Tensor],
    *,
    h: float = STEP,
    rng: Optional[np.random.Generator] = None,
    max_coords: Optional[int] = None,
) -> float:
    """Worst relative error between backward() and central differences."""
    for t in wrt:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    worst = 0.0
    for t, grad in zip(wrt, analytic):
        coords = None
        if max_coords is not None and t.size > max_coords:
            picker = rng or np.random.default_rng(0)
            coords = np.sort(picker.choice(t.size, size=max_coords, replace=False))
        numeric = finite_diff_grad(lambda _x: loss_fn(), t, h, coords).data
        if coords is not None:
            a, n = grad.reshape(-1)[coords], numeric.reshape(-1)[coords]
        else:
            a, n = grad, numeric
        worst = max(worst, relative_error(a, n))
    return worst


def _randn(rng: np.random.Generator, *shape: int, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


def _weights(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.standard_normal(shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _binary(op: Callable[[Tensor, Tensor], Tensor], positive_rhs: bool = False) -> Builder:
    def build(rng):
        x = _randn(rng, 3, 4)
        y = _randn(rng, 4)
        if positive_rhs:
            y.data = np.abs(y.data) + 0.5
        w = _weights(rng, (3, 4))
        return (lambda: _weighted(op(x, y), w)), [x, y]

    return build


_case("add")(_binary(lambda a, b: a + b))
_case("sub")(_binary(lambda a, b: a - b))
_case("mul")(_binary(lambda a, b: a * b))
_case("div")(_binary(lambda a, b: a / b, positive_rhs=True))


def _unary(op: Callable[[Tensor], Tensor], positive: bool = False) -> Builder:
    def build(rng):
        x = _randn(rng, 2, 5)
        if positive:
            x.data = np.abs(x.data) + 0.5
        w = _weights(rng, (2, 5))
        return (lambda: _weighted(op(x), w)), [x]

    return build


_case("neg")(_unary(lambda a: -a))
_case("exp")(_unary(lambda a: a.exp()))
_case("log")(_unary(lambda a: a.log(), positive=True))
_case("sqrt")(_unary(lambda a: a.sqrt(), positive=True))
_case("tanh")(_unary(lambda a: a.tanh()))
_case("gelu")(_unary(gelu))
_case("softmax")(_unary(lambda a: softmax(a, axis=-1)))
_case("log_softmax")(_unary(lambda a: log_softmax(a, axis=-1)))


@_case("sum_mean")
def _sum_mean(rng):
    x = _randn(rng, 3, 4)
    w = _weights(rng, (4,))
    return (lambda: _weighted(x.sum(axis=0), w) + (x * x).mean()), [x]


@_case("reshape_swapaxes")
def _reshape_swapaxes(rng):
    x = _randn(rng, 2, 3, 4)
    w = _weights(rng, (4, 3, 2))
    return (lambda: _weighted(x.reshape(6, 4).reshape(2, 3, 4).swapaxes(0, 2), w)), [x]


@_case("broadcast_to")
def _broadcast(rng):
    x = _randn(rng, 1, 4)
    w = _weights(rng, (3, 4))
    return (lambda: _weighted(x.broadcast_to((3, 4)), w)), [x]


@_case("concat_getitem")
def _concat(rng):
    a, b = _randn(rng, 2, 3), _randn(rng, 2, 2)
    w = _weights(rng, (2, 4))
    return (lambda: _weighted(concat([a, b], axis=1)[:, 1:], w)), [a, b]


@_case("gather_rows")
def _gather(rng):
    x = _randn(rng, 2, 5, 3)
    ids = np.stack([rng.permutation(5)[:3] for _ in range(2)])
    w = _weights(rng, (2, 3, 3))
    return (lambda: _weighted(gather_rows(x, ids), w)), [x]


@_case("matmul")
def _matmul(rng):
    a, b = _randn(rng, 2, 3, 4), _randn(rng, 4, 2)
    w = _weights(rng, (2, 3, 2))
    return (lambda: _weighted(matmul(a, b), w)), [a, b]


@_case("layer_norm")
def _layer_norm(rng):
    x, g, b = _randn(rng, 3, 5), _randn(rng, 5), _randn(rng, 5)
    w = _weights(rng, (3, 5))
    return (lambda: _weighted(layer_norm(x, g, b), w)), [x, g, b]


@_case("cross_entropy")
def _cross_entropy(rng):
    logits = _randn(rng, 4, 3)
    labels = rng.integers(0, 3, size=4)
    return (lambda: cross_entropy(logits, labels)), [logits]


@_case("cosine_similarity")
def _cosine(rng):
    u, v = _randn(rng, 6), _randn(rng, 6)
    return (lambda: cosine_similarity(u, v)), [u, v]


@_case("softmax_matmul_chain")
def _chain(rng):
    x, wmat = _randn(rng, 3, 4), _randn(rng, 4, 5)
    w = _weights(rng, (3, 5))
    return (lambda: _weighted(softmax(matmul(x, wmat) * 0.5, axis=-1).log(), w)), [x, wmat]


# ---------------------------------------------------------------------------
# layers and losses
# ---------------------------------------------------------------------------


@_case("linear")
def _linear(rng):
    layer = Linear(4, 3, rng, std=0.5)
    x = _randn(rng, 2, 4)
    w = _weights(rng, (2, 3))
    return (lambda: _weighted(layer(x), w)), [x, layer.weight, layer.bias]


@_case("attention")
def _attention(rng):
    attn = MultiHeadSelfAttention(4, 2, rng, std=0.5)
    x = _randn(rng, 2, 3, 4)
    w = _weights(rng, (2, 3, 4))
    return (lambda: _weighted(attn(x)[0], w)), [x, attn.wq.weight, attn.wk.weight, attn.wo.weight]


@_case("causal_layer")
def _causal_layer(rng):
    layer = TransformerLayer(4, 2, 2, rng, causal=True, std=0.5)
    x = _randn(rng, 1, 4, 4)
    w = _weights(rng, (1, 4, 4))
    return (lambda: _weighted(layer(x)[0], w)), [x, layer.ln_1.weight, layer.mlp.fc1.weight]


@_case("cosine_matrix")
def _cos_matrix(rng):
    V, T = _randn(rng, 3, 4), _randn(rng, 5, 4)
    w = _weights(rng, (3, 5))
    return (lambda: _weighted(cosine_matrix(V, T), w)), [V, T]


@_case("loss_i2t_pairs")
def _i2t_pairs(rng):
    V, T = _randn(rng, 4, 5), _randn(rng, 4, 5)
    return (lambda: loss_i2t_pairs(V, T)), [V, T]


@_case("loss_t2i_pairs")
def _t2i_pairs(rng):
    V, T = _randn(rng, 4, 5), _randn(rng, 4, 5)
    return (lambda: loss_t2i_pairs(V, T)), [V, T]


@_case("loss_i2t_class")
def _i2t_class(rng):
    V, T = _randn(rng, 4, 5), _randn(rng, 3, 5)
    labels = rng.integers(0, 3, size=4)
    return (lambda: loss_i2t_class(BatchEmbeddings(V, T, labels))), [V, T]


@_case("vlfm", sampled=True)
def _vlfm(rng):
    fp = VisionLanguageFusion(4, 3, rng)
    for p in fp.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    E_V, E_T = _randn(rng, 2, 4), _randn(rng, 3, 4)
    labels = rng.integers(0, 3, size=2)

    def loss():
        return cross_entropy(vlfm_forward(E_V, E_T, fp).logits, labels)

    return loss, [E_V, E_T, fp.wq.weight, fp.wk.weight, fp.wv.weight, fp.trans_expand.weight]


@_case("self_attention_fusion", sampled=True)
def _self_fusion(rng):
    fp = VisionLanguageFusion(4, 3, rng)
    for p in fp.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    E_V = _randn(rng, 2, 4)
    labels = rng.integers(0, 3, size=2)
    return (
        lambda: cross_entropy(vlfm_forward(E_V, None, fp, "self_attention").logits, labels)
    ), [E_V, fp.wv.weight, fp.head2.weight]


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------


def tiny_run_config(seed: int = 0) -> RunConfig:
    """Smallest model that still has a selection layer and a fusion head."""
    return RunConfig(
        vit=ViTConfig(
            image_side=8, patch_size=4, channels=1, dim=8, depth=2, heads=2, mlp_ratio=2, k=2
        ),
        text=TextConfig(depth=1, heads=2, context_length=8, tokens_per_class=2),
        precision="float64",
    ).with_overrides(train={"seed": seed})


def _tiny_model(rng: np.random.Generator) -> Tuple[MPFGVC, np.ndarray, np.ndarray]:
    cfg = tiny_run_config(int(rng.integers(0, 2**31)))
    model = MPFGVC(cfg, ["alpha", "beta", "gamma"], "bird")
    # larger weights keep the gradients well above the difference noise
    for name, p in model.named_parameters():
        if p.ndim >= 2 and not name.startswith("text_encoder"):
            p.data = p.data * 5.0
    images = rng.random((2, 8, 8, 1))
    labels = rng.integers(0, 3, size=2)
    return model, images, labels


@_case("through_selection", sampled=True)
def _through_selection(rng):
    cfg = ViTConfig(
        image_side=8, patch_size=4, channels=1, dim=8, depth=3, heads=2, mlp_ratio=2, k=2
    )
    vit = VisionTransformer(cfg, rng)
    for p in vit.parameters():
        if p.ndim >= 2:
            p.data = rng.standard_normal(p.shape) * 0.3
    images = rng.random((2, 8, 8, 1))
    ids = encode_image(images, vit).selected_ids.copy()
    w = _weights(rng, (2, 8))

    def loss():
        enc = encode_image(images, vit, selected_ids=ids)
        return _weighted(enc.e_v, w)

    wrt = [
        vit.patch_embed.weight,
        vit.class_token,
        vit.pos_embed,
        vit.layers[0].attn.wq.weight,
        vit.layers[-1].mlp.fc2.weight,
    ]
    return loss, wrt


@_case("frozen_text_path", sampled=True)
def _frozen_text(rng):
    cfg = TextConfig(depth=1, heads=2, context_length=8, tokens_per_class=2)
    table = TokenEmbeddingTable(8, 0)
    bank = PromptBank(cfg, ["alpha", "beta", "gamma"], "bird", table, rng)
    bank.X.data = rng.standard_normal(bank.X.shape)
    encoder = TextEncoder(cfg, 8, np.random.default_rng([0, 1]))
    V = _randn(rng, 4, 8)
    labels = rng.integers(0, 3, size=4)
    def loss():
        return loss_i2t_class(BatchEmbeddings(V, encode_text(bank, encoder), labels))

    return loss, [bank.X, V]


@_case("stage1_loss", sampled=True)
def _stage1(rng):
    model, images, labels = _tiny_model(rng)
    model.set_stage("1")
    ids = model.encode(images).selected_ids.copy()

    def loss():
        enc = model.encode(images, selected_ids=ids)
        be = BatchEmbeddings(enc.e_v, model.text_embeddings(), labels)
        return stage1_loss(be, model.head1_logits(enc.e_v)).total

    vit = model.image_encoder
    wrt = [
        vit.patch_embed.weight,
        vit.class_token,
        vit.layers[0].mlp.fc1.weight,
        model.head1.weight,
        model.prompts.X,
    ]
    return loss, wrt


@_case("stage2_loss", sampled=True)
def _stage2(rng):
    model, images, labels = _tiny_model(rng)
    model.set_stage("2")
    e_v = model.encode(images).e_v.detach()
    e_t = model.text_embeddings().detach()
    fp = model.fusion

    def loss():
        return stage2_loss(model.fusion_state(e_v, e_t, "vlfm").logits, labels).total

    wrt = [fp.wq.weight, fp.wk.weight, fp.wv.weight, fp.trans_project.weight, fp.head2.weight]
    return loss, wrt


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


@dataclass
class CaseReport:
    name: str
    max_error: float
    worst_seed: int
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_error <= THRESHOLD


@dataclass
class SuiteReport:
    cases: List[CaseReport] = field(default_factory=list)
    seconds: float = 0.0
    threshold: float = THRESHOLD

    @property
    def passed(self) -> bool:
        return all(c.max_error <= self.threshold for c in self.cases)

    @property
    def failures(self) -> List[CaseReport]:
        return [c for c in self.cases if c.max_error > self.threshold]

    def lines(self) -> List[str]:
        out = []
        for c in self.cases:
            flag = "ok" if c.max_error <= self.threshold else "FAIL"
            out.append(f"{c.name:<24} max_rel_err={c.max_error:.3e} ({c.seeds} seeds) {flag}")
        return out


def run_case(case: GradCase, seed: int) -> float:
    rng = np.random.default_rng([seed, 97])
    loss_fn, wrt = case.build(rng)
    return check_gradients(
        loss_fn, wrt, rng=rng, max_coords=MAX_COORDS if case.sampled else None
    )


def run_suite(
    names: Optional[Iterable[str]] = None,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    *,
    threshold: float = THRESHOLD,
    hub: Optional[EventHub] = None,
) -> SuiteReport:
    """Run the selected cases (all by default) over ``seeds`` at float64."""
    selected = list(names) if names is not None else list(CASES)
    unknown = [n for n in selected if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown gradcheck case(s) {unknown}; known: {sorted(CASES)}")
    report = SuiteReport(threshold=threshold)
    start = time.perf_counter()
    with precision("float64"):
        for name in selected:
            errors = [run_case(CASES[name], seed) for seed in seeds]
            worst = int(np.argmax(errors))
            case = CaseReport(name, float(errors[worst]), int(seeds[worst]), len(seeds))
            report.cases.append(case)
            _LOGGER.debug("%s: %.3e", name, case.max_error)
            if hub is not None:
                hub.emit(event="gradcheck", case=name, max_error=case.max_error, seeds=len(seeds))
    report.seconds = time.perf_counter() - start
    return report
