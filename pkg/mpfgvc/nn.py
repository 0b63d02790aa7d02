"""Parameter containers and the transformer building blocks."""

from __future__ import annotations

import logging
import math
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import Parameter, Tensor, gelu, layer_norm, softmax, trunc_normal

_LOGGER = logging.getLogger(__name__)

_MASK_FILL = -1e9


class Module:
    """Base class: attributes that are Parameters or Modules form the tree."""

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, Any]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._children():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def name_parameters(self, prefix: str = "") -> None:
        for path, p in self.named_parameters(prefix):
            p.name = path

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = True
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise FormatError(
                    "state_dict",
                    f"missing={missing[:5]} unexpected={unexpected[:5]}",
                )
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise FormatError("state_dict", f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)


class Linear(Module):
    """y = x W + b with W stored as [in, out]."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        *,
        bias: bool = True,
        std: float = 0.02,
    ):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features), std))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return self.forward(x.reshape(1, -1)).reshape(-1)
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


def causal_mask(n: int) -> np.ndarray:
    """Additive mask that hides positions j > i from query i."""
    return np.triu(np.full((n, n), _MASK_FILL), k=1)


class MultiHeadSelfAttention(Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        *,
        causal: bool = False,
        std: float = 0.02,
    ):
        if dim % heads:
            raise ConfigError(f"D={dim} not divisible by M={heads}")
        self.dim, self.heads, self.causal = dim, heads, causal
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, std=std)
        self.wk = Linear(dim, dim, rng, std=std)
        self.wv = Linear(dim, dim, rng, std=std)
        self.wo = Linear(dim, dim, rng, std=std)

    def _split(self, t: Tensor, batch: int, n: int) -> Tensor:
        return t.reshape(batch, n, self.heads, self.head_dim).swapaxes(1, 2)

    def forward(self, x: Tensor) -> Tuple[Tensor, np.ndarray]:
        """Attend over ``x`` [B, n, D]; returns the output and probs [B, M, n, n]."""
        batch, n, _ = x.shape
        q = self._split(self.wq(x), batch, n)
        k = self._split(self.wk(x), batch, n)
        v = self._split(self.wv(x), batch, n)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if self.causal:
            scores = scores + causal_mask(n).astype(scores.dtype)
        probs = softmax(scores, axis=-1)
        ctx = (probs @ v).swapaxes(1, 2).reshape(batch, n, self.dim)
        return self.wo(ctx), probs.data


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, *, std: float = 0.02):
        self.fc1 = Linear(dim, hidden, rng, std=std)
        self.fc2 = Linear(hidden, dim, rng, std=std)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_ratio: int,
        rng: np.random.Generator,
        *,
        causal: bool = False,
        std: float = 0.02,
    ):
        self.ln_1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, causal=causal, std=std)
        self.ln_2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng, std=std)

    def forward(self, x: Tensor) -> Tuple[Tensor, np.ndarray]:
        attn_out, probs = self.attn(self.ln_1(x))
        x = x + attn_out
        x = x + self.mlp(self.ln_2(x))
        return x, probs


def zero_module(module: Module) -> Optional[Module]:
    """Set every parameter of ``module`` to zero in place."""
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
    return module
