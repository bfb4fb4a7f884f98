"""Core-node features to k-bit codes: group-average, pool, tanh, sign, pack.

The aggregation is fixed and training-free: channels are averaged within c
contiguous groups, each group map is adaptively average-pooled to h x w, the
c*h*w = k values pass through tanh, and bit i is set iff value >= 0
(sign(0) = +1). Bits pack little-endian into 64-bit words, bit j at word
j//64, position j%64; pad bits above k stay zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import adaptive_spans
from .nn.tensor import Tensor


@dataclass(frozen=True)
class HashConfig:
    k: int
    plan: tuple[int, int, int]  # (c, h, w) with c*h*w == k and h == w

    def __post_init__(self) -> None:
        c, h, w = self.plan
        if self.k < 1:
            raise ConfigError(f"code length must be >= 1, got {self.k}")
        if c * h * w != self.k:
            raise ConfigError(f"plan {self.plan} does not multiply out to k={self.k}")
        if h != w:
            raise ConfigError(f"plan must be spatially square, got {self.plan}")

    @property
    def words(self) -> int:
        return (self.k + 63) // 64


@dataclass(frozen=True)
class HashCode:
    bits: np.ndarray  # (words,) uint64, little-endian bit layout
    real: np.ndarray  # (k,) pre-sign values in (-1, 1)
    k: int


def plan_aggregation(k: int, channels: int, height: int, width: int) -> tuple[int, int, int]:
    """Pick the (c,h,w) aggregation target for a (channels, height, width) core.

    c = ceil(k / (H*W)); if k/c is a perfect square s^2 the plan is (c,s,s),
    otherwise fall back to (k,1,1).
    """
    if height != width:
        raise ShapeError(f"core map must be square, got {height}x{width}")
    if k < 1:
        raise ConfigError(f"code length must be >= 1, got {k}")
    c = math.ceil(k / (height * width))
    if k % c == 0:
        s = math.isqrt(k // c)
        if s * s == k // c:
            return (c, s, s)
    return (k, 1, 1)


def _group_slices(channels: int, groups: int) -> list[slice]:
    """Contiguous channel groups; the last group absorbs any remainder."""
    if groups > channels:
        raise ShapeError(f"cannot split {channels} channels into {groups} groups")
    base = channels // groups
    bounds = [i * base for i in range(groups)] + [channels]
    return [slice(bounds[i], bounds[i + 1]) for i in range(groups)]


def _pool_matrix(src: int, dst: int) -> np.ndarray:
    m = np.zeros((dst, src))
    for i, (a, b) in enumerate(adaptive_spans(src, dst)):
        m[i, a:b] = 1.0 / (b - a)
    return m


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Bool vector -> little-endian uint64 words, pad bits zero."""
    k = bits.shape[0]
    words = np.zeros((k + 63) // 64, dtype=np.uint64)
    idx = np.nonzero(bits)[0]
    np.bitwise_or.at(words, idx >> 6, np.uint64(1) << (idx & 63).astype(np.uint64))
    return words


def unpack_bits(words: np.ndarray, k: int) -> np.ndarray:
    j = np.arange(k)
    return ((words[j >> 6] >> (j & 63).astype(np.uint64)) & np.uint64(1)).astype(bool)


def encode(core, cfg: HashConfig) -> HashCode:
    """Aggregate a (C,H,W) core-node map into a k-bit code."""
    arr = core.data if isinstance(core, Tensor) else np.asarray(core)
    if arr.ndim != 3:
        raise ShapeError(f"encode expects (C,H,W) features, got {arr.shape}")
    channels, height, width = arr.shape
    c, h, w = cfg.plan
    grouped = np.stack([arr[s].mean(axis=0) for s in _group_slices(channels, c)])
    pooled = _pool_matrix(height, h) @ grouped @ _pool_matrix(width, w).T
    real = np.tanh(pooled.reshape(-1).astype(np.float64))
    bits = real >= 0.0
    return HashCode(bits=pack_bits(bits), real=real, k=cfg.k)


def encode_batch(cores, cfg: HashConfig) -> list[HashCode]:
    return [encode(core, cfg) for core in cores]
