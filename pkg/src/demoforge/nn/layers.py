"""Parameterized building blocks: linear maps, norms, attention, transformer blocks."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as F
from .tensor import Tensor

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, op="param")


class Module:
    """Parameters are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        out.update(v.named_parameters(f"{full}.{i}."))
                    elif isinstance(v, Tensor) and v.requires_grad:
                        out[f"{full}.{i}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(trunc_normal(rng, (n_in, n_out)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out or dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head attention; pass ``memory`` for cross-attention."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"hidden size {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        src = x if memory is None else memory
        y = F.softmax_attention(self.q(x), self.k(src), self.v(src), self.heads)
        return self.proj(y)


class Block(Module):
    """Pre-norm transformer block, optionally with a cross-attention sublayer."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: float = 4.0,
                 cross: bool = False):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        if cross:
            self.ln_x = LayerNorm(dim)
            self.xattn = Attention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(round(mlp_ratio * dim)), rng)

    def forward(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x))
        if memory is not None and hasattr(self, "xattn"):
            x = x + self.xattn(self.ln_x(x), memory)
        return x + self.mlp(self.ln2(x))


def sinusoidal(steps, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps, shape (len(steps), dim)."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = steps * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb
