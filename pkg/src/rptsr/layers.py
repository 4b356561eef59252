"""Parameter containers and the transformer building blocks shared by both attention stages."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.DTYPE), requires_grad=True, name=name)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    """Discovers parameters by walking attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator, tag: str = "proj"):
        self.weight = param(trunc_normal(rng, (dim_in, dim_out)))
        self.bias = param(np.zeros(dim_out))
        self.tag = tag

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight, tag=self.tag), self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 groups: int = 1, pad_mode: str = "zero"):
        fan_in = (c_in // groups) * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = param(rng.uniform(-bound, bound, size=(c_out, c_in // groups, kernel, kernel)))
        self.bias = param(np.zeros(c_out))
        self.groups = groups
        self.pad_mode = pad_mode

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, groups=self.groups, pad_mode=self.pad_mode)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim * ratio, rng, tag="mlp")
        self.fc2 = Linear(dim * ratio, dim, rng, tag="mlp")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head self-attention over the second-to-last axis of ``x[..., n, C]``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        *lead, n, c = x.shape
        h, d = self.heads, c // self.heads
        m = len(lead)
        qkv = T.reshape(self.qkv(x), (*lead, n, 3, h, d))
        qkv = T.transpose(qkv, (m + 1, *range(m), m + 2, m, m + 3))  # 3, ..., h, n, d
        q, k, v = (T.reshape(t, (*lead, h, n, d)) for t in T.split(qkv, [1, 1, 1], axis=0))
        scores = T.matmul(T.scale(q, d ** -0.5), T.swap_last(k), tag="attn_core")
        attn = T.softmax_lastdim(scores)
        o = T.matmul(attn, v, tag="attn_core")
        o = T.reshape(T.transpose(o, (*range(m), m + 1, m, m + 2)), (*lead, n, c))
        return self.proj(o), attn.data


class TransformerBlock(Module):
    """Pre-norm attention + MLP, both with residuals: y = x + MSA(LN x); out = y + MLP(LN y)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        a, weights = self.attn(self.norm1(x))
        y = T.add(x, a)
        return T.add(y, self.mlp(self.norm2(y))), weights
