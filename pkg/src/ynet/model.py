"""The Y-shaped graph: backbone with taps, R-MAC branch, FPN branch.

Stride plan (fixed here; the published tap shapes are the contract):

  stem    conv 7x7 /2 + BN + ReLU + maxpool 3x3 /2   -> input/4
  block1  residual, /1, 32ch                         -> b1 = input/4
  block2  residual, /2, 64ch                         -> b2 = input/8
  block3  residual, /2, 128ch                        -> b3 = input/16
  core    conv 3x3 /2 + BN (no ReLU)                 -> core = input/32

The core node stays un-rectified so its activations keep sign information
for the tanh/sign hashing stage. The FPN pathway is linear apart from one
ReLU between the two pre-t3 convs; laterals are 1x1 convs with bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import (
    BatchNormParams,
    BatchNormState,
    ResidualBlockParams,
    Tensor,
    add,
    batch_norm_2d,
    bilinear_resize,
    bilinear_upsample_2x,
    conv2d,
    elementwise_add,
    l2_normalize,
    linear,
    max_pool_2d,
    region_max_pool,
    relu,
    residual_block,
)

Rect = tuple[int, int, int, int]  # x0, y0, x1, y1 (half-open)


@dataclass(frozen=True)
class YNetConfig:
    """Shape and hashing hyperparameters of the network."""

    num_classes: int
    input_size: int = 256
    in_channels: int = 3
    tap_channels: tuple[int, int, int] = (32, 64, 128)
    core_channels: int = 256
    rmac_channels: int = 512
    fpn_channels: int = 32
    mask_classes: int = 2
    rmac_scales: int = 3
    overlap_min: float = 0.4
    code_length: int = 64

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_size % 32 != 0 or self.input_size < 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.code_length < 1:
            raise ConfigError(f"code_length must be >= 1, got {self.code_length}")
        if self.rmac_scales < 1:
            raise ConfigError(f"rmac_scales must be >= 1, got {self.rmac_scales}")
        if len(self.tap_channels) != 3 or any(c < 1 for c in self.tap_channels):
            raise ConfigError(f"tap_channels must be three positive ints, got {self.tap_channels}")
        if self.core_hw < 2:
            raise ConfigError(f"input_size {self.input_size} leaves a core map smaller than 2x2")

    @property
    def core_hw(self) -> int:
        return self.input_size // 32

    @classmethod
    def paper(cls, num_classes: int, **kw) -> "YNetConfig":
        return cls(num_classes=num_classes, input_size=256, **kw)

    @classmethod
    def tiny(cls, num_classes: int, **kw) -> "YNetConfig":
        return cls(num_classes=num_classes, input_size=64, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dc_fields(self)}
        d["tap_channels"] = list(self.tap_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "YNetConfig":
        d = dict(d)
        d["tap_channels"] = tuple(d["tap_channels"])
        return cls(**d)


@dataclass
class BackboneOutput:
    b1: Tensor
    b2: Tensor
    b3: Tensor
    core: Tensor


@dataclass
class YNetParams:
    """All learnable tensors plus BN running stats, grouped per layer."""

    config: YNetConfig
    stem_conv: Tensor
    stem_bn: BatchNormParams
    block1: ResidualBlockParams
    block2: ResidualBlockParams
    block3: ResidualBlockParams
    core_conv: Tensor
    core_bn: BatchNormParams
    rmac_conv: Tensor
    rmac_bn: BatchNormParams
    classifier: Tensor
    fpn_conv1: Tensor
    fpn_conv1_b: Tensor
    fpn_conv2: Tensor
    fpn_conv2_b: Tensor
    lat3: Tensor
    lat3_b: Tensor
    lat2: Tensor
    lat2_b: Tensor
    mask_conv: Tensor
    mask_conv_b: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Learnable tensors in a fixed, serialization-stable order."""

        def bn(prefix: str, p: BatchNormParams):
            yield f"{prefix}.gamma", p.gamma
            yield f"{prefix}.beta", p.beta

        def block(prefix: str, b: ResidualBlockParams):
            yield f"{prefix}.conv1", b.conv1
            yield from bn(f"{prefix}.bn1", b.bn1)
            yield f"{prefix}.conv2", b.conv2
            yield from bn(f"{prefix}.bn2", b.bn2)
            if b.proj is not None:
                yield f"{prefix}.proj", b.proj
                yield from bn(f"{prefix}.bn_proj", b.bn_proj)

        yield "stem.conv", self.stem_conv
        yield from bn("stem.bn", self.stem_bn)
        yield from block("block1", self.block1)
        yield from block("block2", self.block2)
        yield from block("block3", self.block3)
        yield "core.conv", self.core_conv
        yield from bn("core.bn", self.core_bn)
        yield "rmac.conv", self.rmac_conv
        yield from bn("rmac.bn", self.rmac_bn)
        yield "classifier", self.classifier
        yield "fpn.conv1", self.fpn_conv1
        yield "fpn.conv1_b", self.fpn_conv1_b
        yield "fpn.conv2", self.fpn_conv2
        yield "fpn.conv2_b", self.fpn_conv2_b
        yield "fpn.lat3", self.lat3
        yield "fpn.lat3_b", self.lat3_b
        yield "fpn.lat2", self.lat2
        yield "fpn.lat2_b", self.lat2_b
        yield "fpn.mask_conv", self.mask_conv
        yield "fpn.mask_conv_b", self.mask_conv_b

    def bn_params(self) -> Iterator[tuple[str, BatchNormParams]]:
        yield "stem.bn", self.stem_bn
        for prefix, b in (("block1", self.block1), ("block2", self.block2), ("block3", self.block3)):
            yield f"{prefix}.bn1", b.bn1
            yield f"{prefix}.bn2", b.bn2
            if b.bn_proj is not None:
                yield f"{prefix}.bn_proj", b.bn_proj
        yield "core.bn", self.core_bn
        yield "rmac.bn", self.rmac_bn

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every persistent array: weights first, then BN running stats."""
        for name, t in self.named_tensors():
            yield name, t.data
        for name, p in self.bn_params():
            yield f"{name}.running_mean", p.state.running_mean
            yield f"{name}.running_var", p.state.running_var

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()


def _kaiming_conv(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return Tensor(w.astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _bn(channels: int, dtype) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        state=BatchNormState.create(channels, dtype=dtype),
    )


def _residual(rng, c_in: int, c_out: int, stride: int, dtype) -> ResidualBlockParams:
    needs_proj = stride != 1 or c_in != c_out
    return ResidualBlockParams(
        conv1=_kaiming_conv(rng, (c_out, c_in, 3, 3), dtype),
        bn1=_bn(c_out, dtype),
        conv2=_kaiming_conv(rng, (c_out, c_out, 3, 3), dtype),
        bn2=_bn(c_out, dtype),
        proj=_kaiming_conv(rng, (c_out, c_in, 1, 1), dtype) if needs_proj else None,
        bn_proj=_bn(c_out, dtype) if needs_proj else None,
    )


def build_model(config: YNetConfig, seed: int, dtype=np.float32) -> YNetParams:
    """Initialize all weights: Kaiming fan-in normals for convs and the
    classifier, ones/zeros for BN scale/shift. Deterministic under ``seed``."""
    rng = np.random.default_rng(seed)
    t1, t2, t3 = config.tap_channels
    return YNetParams(
        config=config,
        stem_conv=_kaiming_conv(rng, (t1, config.in_channels, 7, 7), dtype),
        stem_bn=_bn(t1, dtype),
        block1=_residual(rng, t1, t1, 1, dtype),
        block2=_residual(rng, t1, t2, 2, dtype),
        block3=_residual(rng, t2, t3, 2, dtype),
        core_conv=_kaiming_conv(rng, (config.core_channels, t3, 3, 3), dtype),
        core_bn=_bn(config.core_channels, dtype),
        rmac_conv=_kaiming_conv(rng, (config.rmac_channels, config.core_channels, 3, 3), dtype),
        rmac_bn=_bn(config.rmac_channels, dtype),
        classifier=_kaiming_conv(rng, (config.num_classes, config.rmac_channels), dtype),
        fpn_conv1=_kaiming_conv(rng, (config.fpn_channels, config.core_channels, 3, 3), dtype),
        fpn_conv1_b=_zeros(config.fpn_channels, dtype),
        fpn_conv2=_kaiming_conv(rng, (config.fpn_channels, config.fpn_channels, 3, 3), dtype),
        fpn_conv2_b=_zeros(config.fpn_channels, dtype),
        lat3=_kaiming_conv(rng, (config.fpn_channels, t3, 1, 1), dtype),
        lat3_b=_zeros(config.fpn_channels, dtype),
        lat2=_kaiming_conv(rng, (config.fpn_channels, t2, 1, 1), dtype),
        lat2_b=_zeros(config.fpn_channels, dtype),
        mask_conv=_kaiming_conv(rng, (config.mask_classes, config.fpn_channels, 3, 3), dtype),
        mask_conv_b=_zeros(config.mask_classes, dtype),
    )


def _check_image(config: YNetConfig, image: Tensor) -> None:
    n = config.input_size
    want = (config.in_channels, n, n)
    got = image.shape[-3:]
    if got != want or image.ndim not in (3, 4):
        raise ShapeError(f"expected image shaped {want} (optionally batched), got {image.shape}")


def _conv_bias(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    y = conv2d(x, w, stride=stride, padding=padding)
    bias = b.reshape(-1, 1, 1) if y.ndim == 3 else b.reshape(1, -1, 1, 1)
    return add(y, bias)


def forward_backbone(params: YNetParams, image: Tensor, mode: str = "eval") -> BackboneOutput:
    """Run the main branch up to the core node; taps returned for the FPN."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    _check_image(params.config, image)

    x = conv2d(image, params.stem_conv, stride=2, padding=3)
    x = relu(batch_norm_2d(x, params.stem_bn.gamma, params.stem_bn.beta, params.stem_bn.state, training))
    x = max_pool_2d(x, kernel_size=3, stride=2, padding=1)
    b1 = residual_block(x, params.block1, stride=1, training=training)
    b2 = residual_block(b1, params.block2, stride=2, training=training)
    b3 = residual_block(b2, params.block3, stride=2, training=training)
    core = conv2d(b3, params.core_conv, stride=2, padding=1)
    core = batch_norm_2d(core, params.core_bn.gamma, params.core_bn.beta, params.core_bn.state, training)
    return BackboneOutput(b1=b1, b2=b2, b3=b3, core=core)


# ---------------------------------------------------------------------------
# R-MAC branch
# ---------------------------------------------------------------------------


def rmac_grid(w_r: int, h_r: int, scales: int, overlap_min: float) -> list[Rect]:
    """Multi-scale rigid grid of square regions over a (h_r, w_r) map.

    Scale s gets side 2*min(w_r,h_r)/(s+2) and (s+1)^2 regions whose corners
    step uniformly so consecutive windows overlap by at least ``overlap_min``
    (checked on the real-valued layout before integer rounding).
    """
    if w_r < 2 or h_r < 2:
        raise ConfigError(f"map must be at least 2x2, got {h_r}x{w_r}")
    if scales < 1:
        raise ConfigError(f"scales must be >= 1, got {scales}")

    regions: list[Rect] = []
    for s in range(scales):
        side = 2.0 * min(w_r, h_r) / (s + 2)
        if s > 0:
            for dim in (w_r, h_r):
                step = (dim - side) / s
                overlap = (side - step) / side
                if overlap < overlap_min:
                    raise ConfigError(
                        f"scale {s}: consecutive-window overlap {overlap:.3f} < {overlap_min}"
                    )
        iside = max(1, round(side))

        def starts(dim: int) -> list[int]:
            if s == 0:
                return [int(round((dim - side) / 2.0))]
            return [int(round(i * (dim - side) / s)) for i in range(s + 1)]

        for y0 in starts(h_r):
            for x0 in starts(w_r):
                x0c = max(0, min(x0, w_r - 1))
                y0c = max(0, min(y0, h_r - 1))
                regions.append((x0c, y0c, min(w_r, x0c + iside), min(h_r, y0c + iside)))
    return regions


def rmac_branch_features(params: YNetParams, core: Tensor, mode: str = "eval") -> Tensor:
    """The convolutional layer the R-MAC block pools over."""
    training = mode == "train"
    x = conv2d(core, params.rmac_conv, stride=1, padding=1)
    x = relu(batch_norm_2d(x, params.rmac_bn.gamma, params.rmac_bn.beta, params.rmac_bn.state, training))
    return x


def rmac_aggregate(features: Tensor, scales: int, overlap_min: float) -> Tensor:
    """Per-region max, per-region L2, sum over regions, final L2."""
    h, w = features.shape[-2], features.shape[-1]
    acc: Optional[Tensor] = None
    for region in rmac_grid(w, h, scales, overlap_min):
        v = l2_normalize(region_max_pool(features, region), axis=-1)
        acc = v if acc is None else elementwise_add(acc, v)
    return l2_normalize(acc, axis=-1)


def rmac_descriptor(params: YNetParams, core: Tensor, mode: str = "eval") -> Tensor:
    """512-d image representation from the core node."""
    feats = rmac_branch_features(params, core, mode)
    return rmac_aggregate(feats, params.config.rmac_scales, params.config.overlap_min)


def classify_logits(params: YNetParams, descriptor: Tensor) -> Tensor:
    """Cosine similarity of the descriptor against L2-normalized class rows."""
    w = l2_normalize(params.classifier, axis=1)
    return linear(descriptor, w)


# ---------------------------------------------------------------------------
# FPN branch
# ---------------------------------------------------------------------------


def fpn_blocks(params: YNetParams, backbone_out: BackboneOutput) -> tuple[Tensor, Tensor, Tensor]:
    """(t3, t2, t1) top-down activations."""
    p = params
    x = _conv_bias(backbone_out.core, p.fpn_conv1, p.fpn_conv1_b, 1, 1)
    x = relu(x)
    x = _conv_bias(x, p.fpn_conv2, p.fpn_conv2_b, 1, 1)
    t3 = elementwise_add(bilinear_upsample_2x(x), _conv_bias(backbone_out.b3, p.lat3, p.lat3_b, 1, 0))
    t2 = elementwise_add(bilinear_upsample_2x(t3), _conv_bias(backbone_out.b2, p.lat2, p.lat2_b, 1, 0))
    t1 = elementwise_add(bilinear_upsample_2x(t2), backbone_out.b1)
    return t3, t2, t1


def fpn_forward(params: YNetParams, backbone_out: BackboneOutput) -> Tensor:
    """Top-down pathway with element-wise merges; returns mask logits at
    input resolution (mask head on t1, upsampled x4)."""
    _, _, t1 = fpn_blocks(params, backbone_out)
    logits = _conv_bias(t1, params.mask_conv, params.mask_conv_b, stride=1, padding=1)
    return bilinear_upsample_2x(bilinear_upsample_2x(logits))


# ---------------------------------------------------------------------------
# visualization
# ---------------------------------------------------------------------------


def feature_heatmap(features, target: int) -> np.ndarray:
    """Channel-mean map, bilinearly resized to (target, target), min-max
    normalized into [0,1]. A constant map normalizes to all 0.5."""
    arr = features.data if isinstance(features, Tensor) else np.asarray(features)
    if arr.ndim != 3:
        raise ShapeError(f"feature_heatmap expects (C,H,W), got {arr.shape}")
    mean = arr.mean(axis=0)
    resized = bilinear_resize(mean, target, target)
    lo, hi = resized.min(), resized.max()
    if hi == lo:
        return np.full((target, target), 0.5)
    return (resized - lo) / (hi - lo)
