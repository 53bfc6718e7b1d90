"""Single-shot attention over (B, C, S, T) feature maps.

Linear variants project with fully connected layers and add a fixed sinusoidal
position embedding; convolutional variants project with 1x1 convolutions that
expand channels by ``d`` and mix the result back in with a trainable scalar
``alpha`` (``alpha * x_hat + x``), starting from the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import Conv2d, Linear, Module, param
from .tensor import Tensor

KINDS = ("linear-seq", "conv-seq", "linear-chanseq", "conv-chanseq", "global")


@dataclass(frozen=True)
class AttentionConfig:
    kind: str
    d1: int = 6
    d2: int = 20
    d: int = 8
    alpha_init: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        if min(self.d1, self.d2, self.d) <= 0:
            raise ConfigError(f"d1, d2, d must be positive, got {self.d1}, {self.d2}, {self.d}")


def sinusoidal_position_embedding(positions: int, features: int) -> np.ndarray:
    """Fixed sine/cosine table of shape (positions, features)."""
    if positions <= 0 or features <= 0:
        raise ConfigError(f"embedding extents must be positive, got {(positions, features)}")
    pos = np.arange(positions, dtype=np.float64)[:, None]
    pair = np.arange(features) // 2
    angle = pos / np.power(10000.0, 2 * pair / features)[None, :]
    table = np.where(np.arange(features) % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


def _check_input(x: Tensor, shape: tuple[int, int, int]) -> None:
    if x.ndim != 4 or x.shape[1:] != shape:
        raise DimensionError(f"attention expects (B, {shape[0]}, {shape[1]}, {shape[2]}), got {x.shape}")


class Attention(Module):
    """Common surface: ``forward`` returns the refined map, ``scores`` the attention matrix."""

    def __init__(self, cfg: AttentionConfig, channels: int, pieces: int, steps: int):
        super().__init__()
        if min(channels, pieces, steps) <= 0:
            raise DimensionError(f"degenerate extents {(channels, pieces, steps)}")
        self.cfg = cfg
        self.in_shape = (channels, pieces, steps)
        self.last_scores: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        out, scores = self.forward_with_scores(x)
        self.last_scores = scores.data
        return out

    def forward_with_scores(self, x: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError


class LinearSeqAttention(Attention):
    def __init__(self, cfg, channels, pieces, steps, rng):
        super().__init__(cfg, channels, pieces, steps)
        feat, hid = channels * steps, cfg.d1 * cfg.d2
        self.pos = Tensor(sinusoidal_position_embedding(pieces, feat))
        self.q = Linear(feat, hid, rng)
        self.k = Linear(feat, hid, rng)
        self.v = Linear(feat, hid, rng)
        self.out = Linear(hid, feat, rng)

    def _heads(self, y: Tensor, B: int, S: int) -> Tensor:
        return y.reshape(B, S, self.cfg.d1, self.cfg.d2).permute(0, 2, 1, 3)

    def forward_with_scores(self, x):
        _check_input(x, self.in_shape)
        B, C, S, Tn = x.shape
        seq = x.permute(0, 2, 1, 3).reshape(B, S, C * Tn) + self.pos
        q, k, v = (self._heads(proj(seq), B, S) for proj in (self.q, self.k, self.v))
        scores = T.softmax_lastdim(T.scale(q @ T.transpose_last(k), 1.0 / math.sqrt(self.cfg.d2)))
        mixed = (scores @ v).permute(0, 2, 1, 3).reshape(B, S, self.cfg.d1 * self.cfg.d2)
        y = self.out(mixed).reshape(B, S, C, Tn).permute(0, 2, 1, 3)
        return y, scores


class LinearChanSeqAttention(Attention):
    def __init__(self, cfg, channels, pieces, steps, rng):
        super().__init__(cfg, channels, pieces, steps)
        hid = cfg.d1 * cfg.d2
        self.pos = Tensor(sinusoidal_position_embedding(pieces, steps))
        self.q = Linear(steps, hid, rng)
        self.k = Linear(steps, hid, rng)
        self.v = Linear(steps, hid, rng)
        self.out = Linear(hid, steps, rng)

    def _heads(self, y: Tensor, B, C, S) -> Tensor:
        return y.reshape(B, C, S, self.cfg.d1, self.cfg.d2).permute(0, 1, 3, 2, 4)

    def forward_with_scores(self, x):
        _check_input(x, self.in_shape)
        B, C, S, Tn = x.shape
        xp = x + self.pos
        q, k, v = (self._heads(proj(xp), B, C, S) for proj in (self.q, self.k, self.v))
        scores = T.softmax_lastdim(T.scale(q @ T.transpose_last(k), 1.0 / math.sqrt(self.cfg.d2)))
        mixed = (scores @ v).permute(0, 1, 3, 2, 4).reshape(B, C, S, self.cfg.d1 * self.cfg.d2)
        return self.out(mixed), scores


class _ConvAttention(Attention):
    """q, k from 1x1 convolutions C -> d*C; output alpha * x_hat + x."""

    def __init__(self, cfg, channels, pieces, steps, rng):
        super().__init__(cfg, channels, pieces, steps)
        self.q = Conv2d(channels, cfg.d * channels, (1, 1), rng)
        self.k = Conv2d(channels, cfg.d * channels, (1, 1), rng)
        self.alpha = param(np.array([cfg.alpha_init], dtype=np.float32))

    def _expanded(self, conv: Conv2d, x: Tensor) -> Tensor:
        B, C, S, Tn = x.shape
        return conv(x).reshape(B, C, self.cfg.d, S, Tn)

    def forward_with_scores(self, x):
        _check_input(x, self.in_shape)
        x_hat, scores = self.refine(x)
        return x_hat * self.alpha + x, scores

    def refine(self, x: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError


class ConvSeqAttention(_ConvAttention):
    def refine(self, x):
        B, C, S, Tn = x.shape
        d = self.cfg.d
        q = self.q(x).permute(0, 2, 1, 3).reshape(B, S, d * C * Tn)
        k = self.k(x).permute(0, 2, 1, 3).reshape(B, S, d * C * Tn)
        scores = T.softmax_lastdim(q @ T.transpose_last(k))  # B, S, S
        flat = x.permute(0, 2, 1, 3).reshape(B, S, C * Tn)
        x_hat = (scores @ flat).reshape(B, S, C, Tn).permute(0, 2, 1, 3)
        return x_hat, scores


class ConvChanSeqAttention(_ConvAttention):
    def refine(self, x):
        B, C, S, Tn = x.shape
        d = self.cfg.d
        q = self._expanded(self.q, x).permute(0, 1, 3, 2, 4).reshape(B, C, S, d * Tn)
        k = self._expanded(self.k, x).permute(0, 1, 3, 2, 4).reshape(B, C, S, d * Tn)
        scores = T.softmax_lastdim(q @ T.transpose_last(k))  # B, C, S, S
        return scores @ x, scores


class GlobalAttention(_ConvAttention):
    def __init__(self, cfg, channels, pieces, steps, rng):
        if pieces != steps:
            raise ConfigError(f"global attention needs S == T, got S={pieces}, T={steps}")
        super().__init__(cfg, channels, pieces, steps, rng)

    def refine(self, x):
        B, C, S, Tn = x.shape
        d = self.cfg.d
        q = self._expanded(self.q, x).permute(0, 1, 3, 2, 4).reshape(B, C, S, d * Tn)
        k = self._expanded(self.k, x).permute(0, 1, 4, 2, 3).reshape(B, C, Tn, d * S)
        scores = T.softmax_lastdim(q @ T.transpose_last(k))  # B, C, S, T
        return scores * x, scores


_CLASSES = {
    "linear-seq": LinearSeqAttention,
    "conv-seq": ConvSeqAttention,
    "linear-chanseq": LinearChanSeqAttention,
    "conv-chanseq": ConvChanSeqAttention,
    "global": GlobalAttention,
}


def build_attention(cfg: AttentionConfig, channels: int, pieces: int, steps: int, rng: np.random.Generator) -> Attention:
    return _CLASSES[cfg.kind](cfg, channels, pieces, steps, rng)
