"""SGD training of both branches under the coupled loss, k-fold selection.

Update rule per tensor: v <- momentum*v - lr*(grad + wd*theta); theta += v.
Batch order is fixed by the seed; BN runs in train mode during updates.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Sample
from .errors import TrainingDiverged, YNetError
from .losses import (
    CircleLossConfig,
    CoupledLossConfig,
    CoupledLossState,
    circle_loss_batch,
    coupled_loss,
    pixel_ce_loss,
)
from .model import YNetConfig, YNetParams, build_model, classify_logits, forward_backbone, fpn_forward, rmac_descriptor
from .nn import Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 32
    loss: CoupledLossConfig = field(default_factory=CoupledLossConfig)
    circle: CircleLossConfig = field(default_factory=CircleLossConfig)
    folds: int = 5
    branches: str = "both"  # "both" | "rmac_only" | "fpn_only"
    recalibrate: bool = True  # refresh BN stats on the final weights

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0 or self.folds < 2:
            raise YNetError("invalid training configuration")
        if self.branches not in ("both", "rmac_only", "fpn_only"):
            raise YNetError(f"unknown branches mode {self.branches!r}")


@dataclass
class StepRecord:
    step: int
    loss: float
    loss_seg: float
    loss_cls: float
    omega: float


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("step,loss,loss_seg,loss_cls,omega\n")
        for r in self.steps:
            out.write(f"{r.step},{r.loss:.9g},{r.loss_seg:.9g},{r.loss_cls:.9g},{r.omega:.9g}\n")
        return out.getvalue()


def _batch_arrays(samples: Sequence[Sample], idx: np.ndarray, dtype) -> tuple[Tensor, np.ndarray, np.ndarray]:
    images = np.stack([samples[i].image for i in idx]).astype(dtype)
    masks = np.stack([samples[i].mask for i in idx])
    labels = np.array([samples[i].label for i in idx])
    return Tensor(images), masks, labels


def train(params: YNetParams, dataset: Sequence[Sample], cfg: TrainConfig) -> tuple[YNetParams, TrainHistory]:
    """Optimize in place; returns the same params plus the step history."""
    if len(dataset) == 0:
        raise YNetError("empty dataset")
    if cfg.batch_size > len(dataset):
        raise YNetError(f"batch_size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    for s in dataset:
        if not np.isin(s.mask, (0, 1)).all():
            raise YNetError(f"sample {s.id!r} has a non-binary mask")

    dtype = params.stem_conv.dtype
    rng = np.random.default_rng(cfg.seed)
    velocity = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}
    history = TrainHistory()
    loss_state: Optional[CoupledLossState] = None
    step = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(dataset), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, masks, labels = _batch_arrays(dataset, idx, dtype)

            bo = forward_backbone(params, images, mode="train")

            def diverged(l_seg, l_cls):
                return TrainingDiverged(
                    f"non-finite loss at step {step}",
                    diagnostic={
                        "epoch": epoch,
                        "step": step,
                        "batch_ids": [dataset[i].id for i in idx],
                        "loss_seg": l_seg,
                        "loss_cls": l_cls,
                    },
                )

            if cfg.branches == "rmac_only":
                cls = circle_loss_batch(classify_logits(params, rmac_descriptor(params, bo.core, "train")), labels, cfg.circle)
                total, l_seg, l_cls, omega = cls, 0.0, float(cls.data), 0.0
            elif cfg.branches == "fpn_only":
                seg = pixel_ce_loss(fpn_forward(params, bo), masks)
                total, l_seg, l_cls, omega = seg, float(seg.data), 0.0, 1.0
            else:
                seg = pixel_ce_loss(fpn_forward(params, bo), masks)
                cls = circle_loss_batch(classify_logits(params, rmac_descriptor(params, bo.core, "train")), labels, cfg.circle)
                l_seg, l_cls = float(seg.data), float(cls.data)
                if not (np.isfinite(l_seg) and np.isfinite(l_cls)):
                    raise diverged(l_seg, l_cls)
                total, loss_state = coupled_loss(seg, cls, cfg.loss, loss_state)
                omega = loss_state.omega

            loss_val = float(total.data)
            if not np.isfinite(loss_val):
                raise diverged(l_seg, l_cls)

            params.zero_grad()
            total.backward()
            for name, t in params.named_tensors():
                g = t.grad if t.grad is not None else np.zeros_like(t.data)
                v = velocity[name]
                v[:] = cfg.momentum * v - cfg.lr * (g + cfg.weight_decay * t.data)
                t.data = t.data + v

            step += 1
            history.steps.append(StepRecord(step=step, loss=loss_val, loss_seg=l_seg, loss_cls=l_cls, omega=omega))
            epoch_losses.append(loss_val)
        history.epoch_loss.append(float(np.mean(epoch_losses)))

    if cfg.recalibrate:
        recalibrate_bn(params, dataset, cfg.batch_size)
    return params, history


def recalibrate_bn(params: YNetParams, dataset: Sequence[Sample], batch_size: int) -> None:
    """Replace EMA running stats with population statistics of the final
    weights: one deterministic sweep in train mode, batch stats averaged.

    The step-wise EMA tracks a moving target while the weights change; the
    eval-mode normalization then lags the network actually being served.
    """
    dtype = params.stem_conv.dtype
    states = [bn.state for _, bn in params.bn_params()]
    for st in states:
        st.capture = []
    try:
        for start in range(0, len(dataset), batch_size):
            part = dataset[start : start + batch_size]
            images = Tensor(np.stack([s.image for s in part]).astype(dtype))
            bo = forward_backbone(params, images, mode="train")
            rmac_descriptor(params, bo.core, mode="train")
        for st in states:
            if st.capture:
                st.running_mean[:] = np.mean([m for m, _ in st.capture], axis=0)
                st.running_var[:] = np.mean([v for _, v in st.capture], axis=0)
    finally:
        for st in states:
            st.capture = None


# ---------------------------------------------------------------------------
# evaluation helpers + k-fold selection
# ---------------------------------------------------------------------------


def classification_accuracy(params: YNetParams, samples: Sequence[Sample], chunk: int = 32) -> float:
    if len(samples) == 0:
        raise YNetError("empty sample set")
    dtype = params.stem_conv.dtype
    correct = 0
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        images = Tensor(np.stack([s.image for s in part]).astype(dtype))
        bo = forward_backbone(params, images, mode="eval")
        cos = classify_logits(params, rmac_descriptor(params, bo.core, "eval"))
        pred = cos.data.argmax(axis=1)
        correct += int((pred == np.array([s.label for s in part])).sum())
    return correct / len(samples)


def pixel_accuracy(params: YNetParams, samples: Sequence[Sample], chunk: int = 32) -> float:
    if len(samples) == 0:
        raise YNetError("empty sample set")
    dtype = params.stem_conv.dtype
    agree = 0
    total = 0
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        images = Tensor(np.stack([s.image for s in part]).astype(dtype))
        bo = forward_backbone(params, images, mode="eval")
        pred = fpn_forward(params, bo).data.argmax(axis=1)
        masks = np.stack([s.mask for s in part])
        agree += int((pred == masks).sum())
        total += masks.size
    return agree / total


def stratified_folds(dataset: Sequence[Sample], folds: int, seed: int) -> list[list[int]]:
    """Round-robin class-stratified fold assignment; falls back to an
    unstratified split when some class has fewer samples than folds."""
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(dataset):
        by_class.setdefault(s.label, []).append(i)
    rng = np.random.default_rng(seed)
    if any(len(v) < folds for v in by_class.values()):
        warnings.warn("a class has fewer samples than folds; using an unstratified split")
        by_class = {0: list(range(len(dataset)))}
    assignment: list[list[int]] = [[] for _ in range(folds)]
    for label in sorted(by_class):
        members = np.array(by_class[label])
        members = members[rng.permutation(len(members))]
        for j, i in enumerate(members.tolist()):
            assignment[j % folds].append(i)
    return assignment


def kfold_select(
    dataset: Sequence[Sample],
    model_cfg: YNetConfig,
    cfg: TrainConfig,
) -> tuple[YNetParams, list[float]]:
    """Train one model per fold; return the one with the best held-out
    (classification accuracy + pixel accuracy) / 2. Ties go to the lowest
    fold index."""
    if len(dataset) < cfg.folds:
        raise YNetError(f"dataset of {len(dataset)} cannot be split into {cfg.folds} folds")
    folds = stratified_folds(dataset, cfg.folds, cfg.seed)
    best: Optional[YNetParams] = None
    best_score = -1.0
    scores: list[float] = []
    for f, held_idx in enumerate(folds):
        held = [dataset[i] for i in held_idx]
        rest = [dataset[i] for i in sorted(set(range(len(dataset))) - set(held_idx))]
        params = build_model(model_cfg, seed=cfg.seed + f)
        fold_cfg = TrainConfig(
            epochs=cfg.epochs,
            seed=cfg.seed + f,
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            batch_size=min(cfg.batch_size, len(rest)),
            loss=cfg.loss,
            circle=cfg.circle,
            folds=cfg.folds,
            branches=cfg.branches,
        )
        train(params, rest, fold_cfg)
        if cfg.branches == "rmac_only":
            score = classification_accuracy(params, held)
        elif cfg.branches == "fpn_only":
            score = pixel_accuracy(params, held)
        else:
            score = 0.5 * (classification_accuracy(params, held) + pixel_accuracy(params, held))
        scores.append(score)
        if score > best_score:
            best, best_score = params, score
    assert best is not None
    return best, scores
