"""Layers composed from the autodiff primitives: linear, layernorm,
embedding, multi-head attention, and pre-norm transformer blocks."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base with dotted-name parameter discovery via attribute order."""

    def params(self) -> list[tuple[str, Tensor]]:
        found: list[tuple[str, Tensor]] = []
        seen: set[str] = set()
        for attr, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                found.append((attr, value))
            elif isinstance(value, Module):
                found.extend((f"{attr}.{n}", p) for n, p in value.params())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend((f"{attr}.{i}.{n}", p) for n, p in item.params())
        for name, _ in found:
            if name in seen:
                raise ValueError(f"duplicate parameter name: {name}")
            seen.add(name)
        return found

    def zero_grad(self):
        for _, p in self.params():
            p.grad = None


def normal_param(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True, std: float = 0.02, dtype=np.float32):
        self.weight = normal_param(rng, (in_dim, out_dim), std, dtype)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        out_dim = self.weight.shape[1]
        flat = T.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        y = T.matmul(flat, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return T.reshape(y, (*lead, out_dim)) if x.ndim != 2 else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, rng, num: int, dim: int, std: float = 0.02, dtype=np.float32):
        self.table = normal_param(rng, (num, dim), std, dtype)

    def __call__(self, idx: np.ndarray) -> Tensor:
        return T.embedding(self.table, idx)


class MultiHeadAttention(Module):
    """Scaled-dot-product attention built from matmul/softmax primitives."""

    def __init__(self, rng, dim: int, heads: int, causal: bool = False, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.causal = causal
        self.qkv = Linear(rng, dim, 3 * dim, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)
        self._mask_cache: dict[int, np.ndarray] = {}

    def __call__(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv = self.qkv(x)                                    # (B,S,3D)
        qkv = T.reshape(qkv, (b, s, 3 * h, hd))
        qkv = T.transpose(qkv, (0, 2, 1, 3))                 # (B,3h,S,hd)
        q, k, v = T.split(qkv, 1, (h, h, h))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        scores = T.mul(scores, Tensor(np.asarray(1.0 / math.sqrt(hd), dtype=x.dtype)))
        if self.causal:
            if s not in self._mask_cache:
                self._mask_cache[s] = np.triu(np.full((s, s), -1e9, dtype=np.float32), k=1)
            scores = T.add(scores, Tensor(self._mask_cache[s].astype(x.dtype, copy=False)))
        attn = T.softmax(scores)
        out = T.matmul(attn, v)                              # (B,h,S,hd)
        out = T.transpose(out, (0, 2, 1, 3))
        out = T.reshape(out, (b, s, d))
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(LN(x)); x + mlp(LN(x)) with GELU.

    mlp_ratio defaults to 2: the desk-scale models run on one CPU core and
    the MLP dominates the flop count.
    """

    def __init__(self, rng, dim: int, heads: int, causal: bool = False, mlp_ratio: int = 2, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(rng, dim, heads, causal, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim, dtype=dtype)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        h = self.fc2(T.gelu(self.fc1(self.ln2(x))))
        return T.add(x, h)


def sinusoidal_embedding(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position table (length x dim, dim even), non-trainable."""
    if dim % 2 != 0:
        raise ValueError(f"sinusoidal embedding dim must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = pos * freqs[None, :]
    emb = np.zeros((length, dim), dtype=np.float64)
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb.astype(dtype)
