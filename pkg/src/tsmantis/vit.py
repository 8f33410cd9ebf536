"""Pre-norm transformer encoder that reads out a class token."""
from __future__ import annotations

from typing import List, Optional

import numpy as np

from .autograd import (DimensionError, LayerNorm, Linear, Module, Tensor, concat, dropout,
                       gelu, softmax)


def positional_encoding(seq_len: int, dim: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd columns."""
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    pos = np.arange(seq_len)[:, None]
    freq = 10000.0 ** (np.arange(0, dim, 2) / dim)
    pe = np.zeros((seq_len, dim))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


class EncoderLayer(Module):
    """``x + MHA(LN(x))`` followed by ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, num_heads: int, mlp_dim: int, dropout_rate: float,
                 rng: np.random.Generator):
        if dim % num_heads:
            raise ValueError(f"dim {dim} is not divisible by {num_heads} heads")
        self._heads = num_heads
        self._dropout = dropout_rate
        self._last_attention: Optional[np.ndarray] = None
        self.norm1 = LayerNorm(dim)
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_dim, rng)
        self.fc2 = Linear(mlp_dim, dim, rng)

    @property
    def last_attention(self) -> Optional[np.ndarray]:
        """Attention weights ``(batch, heads, n, n)`` from the most recent call."""
        return self._last_attention

    def _split(self, x: Tensor) -> Tensor:
        batch, n, dim = x.shape
        return x.reshape(batch, n, self._heads, dim // self._heads).transpose(0, 2, 1, 3)

    def attention(self, x: Tensor, train: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
        batch, n, dim = x.shape
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        scale = 1.0 / np.sqrt(dim // self._heads)
        weights = softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1)
        self._last_attention = weights.data
        weights = dropout(weights, self._dropout, train, rng)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, n, dim)
        return self.wo(ctx)

    def mlp(self, x: Tensor, train: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
        hidden = dropout(gelu(self.fc1(x)), self._dropout, train, rng)
        return self.fc2(hidden)

    def __call__(self, x: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        x = x + self.attention(self.norm1(x), train, rng)
        return x + self.mlp(self.norm2(x), train, rng)


class ViTEncoder(Module):
    def __init__(self, dim: int = 256, num_tokens: int = 32, num_layers: int = 6,
                 num_heads: int = 8, mlp_dim: int = 2048, dropout_rate: float = 0.1,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self._num_tokens = num_tokens
        self._dim = dim
        self._pe = positional_encoding(num_tokens + 1, dim)
        self.class_token = Tensor(rng.normal(0.0, 0.02, (1, dim)), requires_grad=True)
        self.layers: List[EncoderLayer] = [
            EncoderLayer(dim, num_heads, mlp_dim, dropout_rate, rng) for _ in range(num_layers)]
        self.final_norm = LayerNorm(dim)

    def sequence(self, tokens: Tensor) -> Tensor:
        """Class token prepended and positions added: ``(batch, num_tokens + 1, dim)``."""
        batch = tokens.shape[0]
        cls = self.class_token.reshape(1, 1, self._dim) + Tensor(
            np.zeros((batch, 1, self._dim)), dtype=tokens.dtype)
        seq = concat([cls, tokens], axis=1)
        return seq + Tensor(self._pe, dtype=tokens.dtype)

    def __call__(self, tokens: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        if tokens.ndim != 3 or tokens.shape[1:] != (self._num_tokens, self._dim):
            raise DimensionError(
                f"expected tokens of shape (batch, {self._num_tokens}, {self._dim}), "
                f"got {tokens.shape}")
        x = self.sequence(tokens)
        for layer in self.layers:
            x = layer(x, train, rng)
        return self.final_norm(x)[:, 0, :]
