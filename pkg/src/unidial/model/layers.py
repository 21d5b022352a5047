"""Transformer building blocks on the autograd engine."""
from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..autograd import Module, Tensor

NEG_INF = -1e9


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype, std: float = 0.02):
        self.weight = _param(rng.normal(0.0, std, (n_in, n_out)), dtype)
        self.bias = _param(np.zeros(n_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype, eps: float = 1e-12):
        self.gain = _param(np.ones(dim), dtype)
        self.bias = _param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, dtype, std: float = 0.02):
        self.weight = _param(rng.normal(0.0, std, (n, dim)), dtype)

    def __call__(self, ids) -> Tensor:
        return ag.embedding(self.weight, ids)


class Dropout(Module):
    def __init__(self, p: float):
        self.p = p
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.dropout(x, self.p, self.rng, self.training)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng, dtype):
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.o = Linear(dim, dim, rng, dtype)
        self.record = False
        self.last_probs: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return ag.transpose(x.reshape(b, t, self.n_heads, d // self.n_heads), (0, 2, 1, 3))

    def __call__(self, x_q: Tensor, x_kv: Tensor, bias: np.ndarray | None) -> Tensor:
        q, k, v = self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(self.v(x_kv))
        out, probs = ag.attention(q, k, v, bias)
        if self.record:
            self.last_probs = probs
        b, h, t, dh = out.shape
        return self.o(ag.transpose(out, (0, 2, 1, 3)).reshape(b, t, h * dh))


class FeedForward(Module):
    def __init__(self, dim: int, mult: int, rng, dtype):
        self.up = Linear(dim, mult * dim, rng, dtype)
        self.down = Linear(mult * dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ag.gelu(self.up(x)))


class Residual(Module):
    """Post-norm residual wrapper: ``LN(x + dropout(f(x)))``."""

    def __init__(self, dim: int, dropout: float, dtype, eps: float):
        self.norm = LayerNorm(dim, dtype, eps)
        self.drop = Dropout(dropout)

    def __call__(self, x: Tensor, fx: Tensor) -> Tensor:
        return self.norm(x + self.drop(fx))


def key_padding_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """(B, T) 0/1 mask -> additive (B, 1, 1, T) bias."""
    return np.where(mask[:, None, None, :] > 0, 0.0, NEG_INF).astype(dtype)


def causal_bias(t: int, dtype) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF), k=1).astype(dtype)[None, None]
