"""Training objectives: circle loss, pixel-wise CE, and the coupled loss.

The circle loss follows the class-level form: each cosine similarity is
penalized in proportion to its distance from its optimum (1+m for the
positive, -m for negatives), scaled by gamma. Gradients flow through the
adaptive weights as well, so finite differences of the implemented value
match the analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError, YNetError
from .nn import (
    Tensor,
    add,
    drop_index,
    logsumexp,
    mul,
    relu,
    softmax_cross_entropy,
    softplus,
    sub,
    take,
)


@dataclass(frozen=True)
class CircleLossConfig:
    gamma: float = 32.0
    margin: float = 0.25

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.margin < 1:
            raise ConfigError(f"margin must be in (0,1), got {self.margin}")


@dataclass(frozen=True)
class CoupledLossConfig:
    omega: float = 0.5
    mode: str = "magnitude-balanced"  # or "fixed"
    ema_decay: float = 0.9
    omega_clip: tuple[float, float] = (0.1, 0.9)

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "magnitude-balanced"):
            raise ConfigError(f"unknown coupled-loss mode {self.mode!r}")
        lo, hi = self.omega_clip
        if not 0 <= lo <= hi <= 1:
            raise ConfigError(f"bad omega_clip {self.omega_clip}")
        if self.mode == "fixed" and not 0 <= self.omega <= 1:
            raise ConfigError(f"fixed omega must be in [0,1], got {self.omega}")


@dataclass
class CoupledLossState:
    """EMA means of both loss terms, owned by the training thread."""

    mean_seg: float = 0.0
    mean_cls: float = 0.0
    omega: float = 0.5
    initialized: bool = False


def circle_loss(cosines: Tensor, label: int, cfg: CircleLossConfig) -> Tensor:
    """log(1 + e^{-g*a_p*(s_p - (1-m))} * sum_j e^{g*a_n_j*(s_n_j - m)}).

    a_p = [1+m-s_p]_+ and a_n = [s_n+m]_+ are the self-paced weights; an
    empty negative set gives exactly 0.
    """
    if cosines.ndim != 1:
        raise ShapeError(f"circle_loss expects a cosine vector, got {cosines.shape}")
    n = cosines.shape[0]
    if not 0 <= label < n:
        raise YNetError(f"label {label} out of range for {n} classes")
    if n == 1:
        return mul(take(cosines, 0), 0.0)

    m, gamma = cfg.margin, cfg.gamma
    s_p = take(cosines, label)
    s_n = drop_index(cosines, label)
    alpha_p = relu(sub(1.0 + m, s_p))
    alpha_n = relu(add(s_n, m))
    logit_p = mul(mul(alpha_p, sub(s_p, 1.0 - m)), -gamma)
    logits_n = mul(mul(alpha_n, sub(s_n, m)), gamma)
    return softplus(add(logit_p, logsumexp(logits_n)))


def circle_loss_batch(cosines: Tensor, labels: np.ndarray, cfg: CircleLossConfig) -> Tensor:
    """Mean circle loss over a batch of cosine rows."""
    if cosines.ndim != 2:
        raise ShapeError(f"expected (N, num_classes) cosines, got {cosines.shape}")
    total: Optional[Tensor] = None
    for i, lab in enumerate(np.asarray(labels).tolist()):
        li = circle_loss(take_row(cosines, i), int(lab), cfg)
        total = li if total is None else add(total, li)
    return mul(total, 1.0 / cosines.shape[0])


def take_row(x: Tensor, i: int) -> Tensor:
    """Row i of a matrix tensor, with scatter gradient."""
    from .nn.tensor import make_node

    data = x.data[i]

    def backward(g, send):
        gx = np.zeros_like(x.data)
        gx[i] = g
        send(x, gx)

    return make_node(data, (x,), backward)


def pixel_ce_loss(mask_logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean 2-class softmax cross-entropy over all pixels."""
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise YNetError("mask must be binary {0,1}")
    return softmax_cross_entropy(mask_logits, m.astype(np.int64))


def coupled_loss(
    loss_seg: Tensor,
    loss_cls: Tensor,
    cfg: CoupledLossConfig,
    state: Optional[CoupledLossState] = None,
) -> tuple[Tensor, CoupledLossState]:
    """L = w*L_seg + (1-w)*L_cls.

    Fixed mode uses cfg.omega. Magnitude-balanced mode keeps EMA means of
    both terms (decay cfg.ema_decay, seeded from the first batch, first batch
    weighted at the initial 0.5) and sets w = clip(m_cls/(m_seg+m_cls)) so the
    two weighted terms match in magnitude.
    """
    l_seg = float(loss_seg.data)
    l_cls = float(loss_cls.data)
    if not (np.isfinite(l_seg) and np.isfinite(l_cls)):
        raise YNetError(f"non-finite loss inputs: seg={l_seg}, cls={l_cls}")
    if l_seg < 0 or l_cls < 0:
        raise YNetError(f"loss terms must be non-negative: seg={l_seg}, cls={l_cls}")

    state = state or CoupledLossState(omega=cfg.omega if cfg.mode == "fixed" else 0.5)
    if cfg.mode == "fixed":
        omega = cfg.omega
    else:
        if not state.initialized:
            state.mean_seg = l_seg
            state.mean_cls = l_cls
            state.initialized = True
            omega = state.omega  # first batch keeps the initial 0.5
        else:
            d = cfg.ema_decay
            state.mean_seg = d * state.mean_seg + (1 - d) * l_seg
            state.mean_cls = d * state.mean_cls + (1 - d) * l_cls
            denom = state.mean_seg + state.mean_cls
            lo, hi = cfg.omega_clip
            omega = 0.5 if denom == 0 else min(hi, max(lo, state.mean_cls / denom))
    state.omega = omega
    total = add(mul(loss_seg, omega), mul(loss_cls, 1.0 - omega))
    return total, state
