"""Differentiable ops over the tape.

Spatial ops accept a single map (C,H,W) or a batch (N,C,H,W) and return the
same rank. Conventions fixed here and relied on elsewhere:

  * max-style ops break ties by first occurrence in row-major order;
  * bilinear interpolation samples half-pixel centers with edge clamping;
  * l2_normalize maps the zero vector to zero (gradient zero there);
  * sign conventions for hashing live in ``ynet.hashing``, not here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_node

# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g, send):
        send(a, _unbroadcast(g, a.shape))
        send(b, _unbroadcast(g, b.shape))

    return make_node(out, (a, b), backward)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")
    return add(a, b)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def backward(g, send):
        send(a, _unbroadcast(g, a.shape))
        send(b, _unbroadcast(-g, b.shape))

    return make_node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g, send):
        send(a, _unbroadcast(g * b.data, a.shape))
        send(b, _unbroadcast(g * a.data, b.shape))

    return make_node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def backward(g, send):
        send(a, _unbroadcast(g / b.data, a.shape))
        send(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_node(out, (a, b), backward)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def backward(g, send):
        send(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=True))

    return make_node(out, (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean())

    def backward(g, send):
        send(x, np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True))

    return make_node(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g, send):
        send(x, g.reshape(x.shape))

    return make_node(out, (x,), backward)


def take(x: Tensor, index: int) -> Tensor:
    """Scalar element of a 1-d tensor, with scatter gradient."""
    if x.ndim != 1:
        raise ShapeError(f"take expects a vector, got shape {x.shape}")
    out = np.asarray(x.data[index])

    def backward(g, send):
        gx = np.zeros_like(x.data)
        gx[index] = g
        send(x, gx)

    return make_node(out, (x,), backward)


def drop_index(x: Tensor, index: int) -> Tensor:
    """1-d tensor with element ``index`` removed."""
    if x.ndim != 1:
        raise ShapeError(f"drop_index expects a vector, got shape {x.shape}")
    keep = np.arange(x.shape[0]) != index
    out = x.data[keep]

    def backward(g, send):
        gx = np.zeros_like(x.data)
        gx[keep] = g
        send(x, gx)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g, send):
        send(x, g * (x.data > 0))

    return make_node(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g, send):
        send(x, g * (1.0 - out * out))

    return make_node(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g, send):
        send(x, g * out)

    return make_node(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g, send):
        send(x, g / x.data)

    return make_node(out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) as max(x,0) + log1p(e^{-|x|}), stable for large |x|."""
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def backward(g, send):
        send(x, g / (1.0 + np.exp(-d)))

    return make_node(out, (x,), backward)


def logsumexp(x: Tensor) -> Tensor:
    """log Σ e^{x_i} over all elements of a nonempty tensor."""
    if x.size == 0:
        raise ShapeError("logsumexp of an empty tensor")
    m = x.data.max()
    e = np.exp(x.data - m)
    s = e.sum()
    out = np.asarray(m + np.log(s))

    def backward(g, send):
        send(x, g * e / s)

    return make_node(out, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / ||x|| along ``axis``; the zero vector maps to zero.

    The norm is computed on max-rescaled values so subnormal inputs do not
    underflow to a spurious zero.
    """
    scale = np.abs(x.data).max(axis=axis, keepdims=True)
    safe_scale = np.where(scale == 0, 1.0, scale)
    scaled = x.data / safe_scale
    snorm = np.sqrt((scaled * scaled).sum(axis=axis, keepdims=True))
    safe_snorm = np.where(scale == 0, 1.0, snorm)
    out = scaled / safe_snorm  # normalize the rescaled vector: no underflow

    def backward(g, send):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gx = (g - out * dot) / (safe_scale * safe_snorm)
        gx = np.where(scale == 0, 0.0, gx)
        send(x, gx)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear / conv / pooling
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x W^T (+ b) on (in,) or (N, in) inputs; weight is (out, in)."""
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g, send):
        if x.ndim == 1:
            send(weight, np.outer(g, x.data))
            send(x, g @ weight.data)
        else:
            send(weight, g.T @ x.data)
            send(x, g @ weight.data)
        if bias is not None:
            send(bias, g if g.ndim == 1 else g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def _as_batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; kernel is (C_out, C_in, kh, kw)."""
    xd, single = _as_batched(x)
    wd = kernel.data
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d, got {kernel.shape}")
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = wd.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernel expects {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C_in, oh, ow, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c_in * kh * kw)
    wmat = wd.reshape(c_out, -1)
    y = cols @ wmat.T                                   # (N, L, C_out)
    y = y.transpose(0, 2, 1).reshape(n, c_out, oh, ow)

    def backward(g, send):
        gb = g[None] if single else g
        gmat = gb.reshape(n, c_out, oh * ow).transpose(0, 2, 1)  # (N, L, C_out)
        dw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1]))     # (C_out, C_in*kh*kw)
        send(kernel, dw.reshape(wd.shape))
        dcols = gmat @ wmat                                      # (N, L, C_in*kh*kw)
        dcols = dcols.reshape(n, oh, ow, c_in, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        send(x, dx[0] if single else dx)

    out = y[0] if single else y
    return make_node(out, (x, kernel), backward)


def max_pool_2d(x: Tensor, kernel_size: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; gradient routes to the first maximum in row-major order."""
    xd, single = _as_batched(x)
    n, c, h, w = xd.shape
    k = kernel_size
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool_2d output would be empty for input {x.shape}")
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    else:
        xp = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, k * k)
    amax = flat.argmax(axis=-1)                      # first occurrence, row-major
    y = np.take_along_axis(flat, amax[..., None], axis=-1)[..., 0]

    def backward(g, send):
        gb = g[None] if single else g
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
        ki, kj = np.divmod(amax, k)
        ib, ic, io, jo = np.indices((n, c, oh, ow), sparse=False)
        rows = io * stride + ki
        cols_ = jo * stride + kj
        np.add.at(dxp, (ib, ic, rows, cols_), gb)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        send(x, dx[0] if single else dx)

    out = y[0] if single else y
    return make_node(out, (x,), backward)


def region_max_pool(x: Tensor, region: tuple[int, int, int, int]) -> Tensor:
    """Per-channel max over [y0:y1, x0:x1); returns (C,) or (N,C)."""
    xd, single = _as_batched(x)
    n, c, h, w = xd.shape
    x0, y0, x1, y1 = region
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ShapeError(f"empty or out-of-range region {region} for map {h}x{w}")
    patch = xd[:, :, y0:y1, x0:x1]
    flat = patch.reshape(n, c, -1)
    amax = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, amax[..., None], axis=-1)[..., 0]

    def backward(g, send):
        gb = g[None] if single else g
        dx = np.zeros_like(xd)
        ri, ci = np.divmod(amax, x1 - x0)
        ib, ic = np.indices((n, c))
        np.add.at(dx, (ib, ic, y0 + ri, x0 + ci), gb)
        send(x, dx[0] if single else dx)

    out = y[0] if single else y
    return make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# interpolation and average pooling (matrix form: y = R x C^T)
# ---------------------------------------------------------------------------


def bilinear_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """(dst, src) interpolation matrix: half-pixel centers, edges clamped."""
    u = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    i0 = np.floor(u).astype(int)
    frac = u - i0
    lo = np.clip(i0, 0, src - 1)
    hi = np.clip(i0 + 1, 0, src - 1)
    m = np.zeros((dst, src), dtype=dtype)
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def average_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """(dst, src) adaptive-average matrix with spans [floor(i*s/d), ceil((i+1)*s/d))."""
    m = np.zeros((dst, src), dtype=dtype)
    for i, (a, b) in enumerate(adaptive_spans(src, dst)):
        m[i, a:b] = 1.0 / (b - a)
    return m


def adaptive_spans(src: int, dst: int) -> list[tuple[int, int]]:
    return [(int(np.floor(i * src / dst)), int(np.ceil((i + 1) * src / dst))) for i in range(dst)]


def _sep_apply(x: Tensor, rmat: np.ndarray, cmat: np.ndarray) -> Tensor:
    """y = rmat @ x @ cmat^T on the two trailing spatial axes; exact adjoint backward."""
    xd, single = _as_batched(x)
    rm = rmat.astype(xd.dtype, copy=False)
    cm = cmat.astype(xd.dtype, copy=False)
    y = rm @ xd @ cm.T

    def backward(g, send):
        gb = g[None] if single else g
        dx = rm.T @ gb @ cm
        send(x, dx[0] if single else dx)

    out = y[0] if single else y
    return make_node(out, (x,), backward)


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double both spatial dims by bilinear interpolation."""
    xd, _ = _as_batched(x)
    h, w = xd.shape[2], xd.shape[3]
    return _sep_apply(x, bilinear_matrix(h, 2 * h), bilinear_matrix(w, 2 * w))


def adaptive_avg_pool_2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    xd, _ = _as_batched(x)
    h, w = xd.shape[2], xd.shape[3]
    oh, ow = out_hw
    if not (1 <= oh and 1 <= ow):
        raise ShapeError(f"adaptive_avg_pool_2d target must be positive, got {out_hw}")
    return _sep_apply(x, average_matrix(h, oh), average_matrix(w, ow))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes; returns (C,) or (N,C)."""
    pooled = adaptive_avg_pool_2d(x, (1, 1))
    if pooled.ndim == 3:
        return reshape(pooled, (pooled.shape[0],))
    return reshape(pooled, (pooled.shape[0], pooled.shape[1]))


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain numpy resize of an (H,W) or (C,H,W) array; same sampling convention."""
    h, w = arr.shape[-2], arr.shape[-1]
    rm = bilinear_matrix(h, out_h)
    cm = bilinear_matrix(w, out_w)
    return rm @ arr.astype(np.float64, copy=False) @ cm.T


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics owned by one normalization layer.

    When ``capture`` is set to a list, train-mode calls also append their raw
    batch statistics to it; the trainer uses this to recompute population
    stats on the final weights.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    capture: Optional[list] = None

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState


def batch_norm_2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: Optional[BatchNormState],
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N,H,W); biased variance throughout.

    Training mode normalizes with batch statistics and, when ``state`` is
    given, folds them into the running stats in place. Eval mode is a pure
    per-channel affine map using the running stats.
    """
    xd, single = _as_batched(x)
    n, c, h, w = xd.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm_2d: scale/shift must be ({c},)")

    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if state is not None:
            state.running_mean[:] = (1 - momentum) * state.running_mean + momentum * mu
            state.running_var[:] = (1 - momentum) * state.running_var + momentum * var
            if state.capture is not None:
                state.capture.append((mu.copy(), var.copy()))
    else:
        if state is None:
            raise ShapeError("batch_norm_2d eval mode requires running stats")
        mu = state.running_mean.astype(xd.dtype, copy=False)
        var = state.running_var.astype(xd.dtype, copy=False)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[:, None, None]) * inv[:, None, None]
    y = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward(g, send):
        gb = g[None] if single else g
        send(beta, gb.sum(axis=(0, 2, 3)))
        send(gamma, (gb * xhat).sum(axis=(0, 2, 3)))
        dxhat = gb * gamma.data[:, None, None]
        if training:
            m = n * h * w
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (dxhat - s1 / m - xhat * s2 / m) * inv[:, None, None]
        else:
            dx = dxhat * inv[:, None, None]
        send(x, dx[0] if single else dx)

    out = y[0] if single else y
    return make_node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# losses-adjacent primitives
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy with integer targets.

    Accepted layouts: (C,) + scalar, (N,C) + (N,), (C,H,W) + (H,W),
    (N,C,H,W) + (N,H,W). The class axis is axis 0 for unbatched inputs and
    axis 1 for batched ones.
    """
    t = np.asarray(targets)
    if logits.ndim != t.ndim + 1:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if logits.ndim in (1, 3) and logits.shape[1:] == t.shape:
        class_axis = 0  # (C,)+scalar or (C,H,W)+(H,W)
    elif logits.ndim in (2, 4) and logits.shape[:1] + logits.shape[2:] == t.shape:
        class_axis = 1  # (N,C)+(N,) or (N,C,H,W)+(N,H,W)
    else:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {t.shape}")

    ld = logits.data
    z = ld - ld.max(axis=class_axis, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=class_axis, keepdims=True))
    tt = np.expand_dims(t.astype(np.int64), class_axis)
    picked = np.take_along_axis(logp, tt, axis=class_axis)
    count = picked.size
    loss = np.asarray(-picked.sum() / count)

    def backward(g, send):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tt, 1.0, axis=class_axis)
        send(logits, g * (p - onehot) / count)

    return make_node(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# residual block
# ---------------------------------------------------------------------------


@dataclass
class ResidualBlockParams:
    """Two 3x3 convs with BN/ReLU plus identity or projected shortcut."""

    conv1: Tensor
    bn1: BatchNormParams
    conv2: Tensor
    bn2: BatchNormParams
    proj: Optional[Tensor] = None
    bn_proj: Optional[BatchNormParams] = None


def residual_block(x: Tensor, p: ResidualBlockParams, stride: int, training: bool) -> Tensor:
    h = conv2d(x, p.conv1, stride=stride, padding=1)
    h = relu(batch_norm_2d(h, p.bn1.gamma, p.bn1.beta, p.bn1.state, training))
    h = conv2d(h, p.conv2, stride=1, padding=1)
    h = batch_norm_2d(h, p.bn2.gamma, p.bn2.beta, p.bn2.state, training)
    if p.proj is not None:
        sc = conv2d(x, p.proj, stride=stride, padding=0)
        sc = batch_norm_2d(sc, p.bn_proj.gamma, p.bn_proj.beta, p.bn_proj.state, training)
    else:
        sc = x
    return relu(elementwise_add(h, sc))
