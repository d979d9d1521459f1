"""Loss, optimiser and training loop for the segmentation networks.

Training is a pure function of ``(spec, records, config)``: weight
initialisation, the per-epoch shuffle, and every augmentation draw run on
seeded generators, so two runs with the same inputs produce bit-identical
weights.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..augment import AugmentConfig, augment_batch, minmax_image
from ..errors import ArgumentError, DivergenceError
from ..labels import WATER_CUTOFF
from ..metrics import ConfusionCounts, confusion, prf1
from .layers import BatchNorm2d
from .models import Model, ModelSpec, build_model

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "AdamState",
    "bce_loss",
    "calibrate_stats",
    "history_csv",
    "loss_and_grads",
    "optimizer_step",
    "train",
]

#: probability clamp for the entropy loss
LOSS_EPS = 1e-7
#: probability cutoff matching the uint8 label cutoff after /255 scaling
PROB_CUTOFF = WATER_CUTOFF / 255.0


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``lr_decay`` is a per-epoch multiplicative factor (1.0 = constant
    rate).  ``eval_crop`` bounds the center crop used for validation
    metrics; ``None`` evaluates full chips.  ``augment`` carries the
    stochastic-preprocessing settings applied to every training batch.
    """

    batch: int = 24
    epochs: int = 100
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int = 10
    lr_decay: float = 1.0
    eval_crop: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.batch < 1:
            raise ArgumentError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if not self.base_lr > 0:
            raise ArgumentError(f"base_lr must be > 0, got {self.base_lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ArgumentError("moment decays must lie in [0, 1)")
        if self.patience < 1:
            raise ArgumentError(f"patience must be >= 1, got {self.patience}")
        if not 0 < self.lr_decay <= 1:
            raise ArgumentError(f"lr_decay must be in (0, 1], got {self.lr_decay}")


@dataclass
class TrainHistory:
    """Per-epoch curves; every list has one entry per completed epoch."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_precision: list[float] = field(default_factory=list)
    train_recall: list[float] = field(default_factory=list)
    train_f1: list[float] = field(default_factory=list)
    val_precision: list[float] = field(default_factory=list)
    val_recall: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)

    @property
    def epochs_completed(self) -> int:
        return len(self.train_loss)

    def append(self, train_loss: float, train_m: tuple[float, float, float],
               val_loss: float, val_m: tuple[float, float, float]) -> None:
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.train_precision.append(train_m[0])
        self.train_recall.append(train_m[1])
        self.train_f1.append(train_m[2])
        self.val_precision.append(val_m[0])
        self.val_recall.append(val_m[1])
        self.val_f1.append(val_m[2])


def history_csv(history: TrainHistory) -> str:
    """Training curves as CSV, one row per completed epoch."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss",
                     "train_precision", "train_recall", "train_f1",
                     "val_precision", "val_recall", "val_f1"])
    for i in range(history.epochs_completed):
        writer.writerow([i + 1] + [f"{v:.6f}" for v in (
            history.train_loss[i], history.val_loss[i],
            history.train_precision[i], history.train_recall[i],
            history.train_f1[i], history.val_precision[i],
            history.val_recall[i], history.val_f1[i])])
    return out.getvalue()


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like model weights."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def bce_loss(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean binary cross entropy with probabilities clamped to
    ``[1e-7, 1 - 1e-7]`` (bounding the per-pixel loss by about 16.12)."""
    p = np.clip(probs, LOSS_EPS, 1.0 - LOSS_EPS).astype(np.float64, copy=False)
    y = np.asarray(targets, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def loss_and_grads(model: Model, batch: np.ndarray, targets: np.ndarray,
                   return_probs: bool = False):
    """Forward + reverse pass: entropy loss and all parameter gradients.

    ``batch`` is ``(N, C, H, W)``, ``targets`` ``(N, H, W)`` in [0, 1].
    Raises :class:`DivergenceError` if the loss is non-finite.  With
    ``return_probs`` the forward probabilities are returned as well.
    """
    batch = np.asarray(batch)
    targets = np.asarray(targets)
    probs = model.forward(batch, training=True)
    if probs.shape != targets.shape:
        raise ArgumentError(
            f"target shape {targets.shape} does not match output {probs.shape}"
        )
    loss = bce_loss(probs, targets)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss: {loss}")
    # d(loss)/d(logits); the clamp zeroes the gradient where it saturates
    inside = (probs >= LOSS_EPS) & (probs <= 1.0 - LOSS_EPS)
    dz = np.where(inside, probs - targets.astype(probs.dtype, copy=False), 0.0)
    dz = (dz / probs.size).astype(model.dtype, copy=False)
    grads = model.backward_from_logits(dz)
    if return_probs:
        return loss, grads, probs
    return loss, grads


def optimizer_step(model: Model, grads: dict[str, np.ndarray], state: AdamState,
                   cfg: TrainConfig, lr: float | None = None) -> tuple[Model, AdamState]:
    """One Adam update, in place on the model's weights."""
    if lr is None:
        lr = cfg.base_lr
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for i, layer in enumerate(model.layers):
        for name, param in layer.params().items():
            key = f"n{i}.{name}"
            g = grads[key]
            if key not in state.m:
                state.m[key] = np.zeros_like(param, dtype=np.float64)
                state.v[key] = np.zeros_like(param, dtype=np.float64)
            m = state.m[key]
            v = state.v[key]
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            step = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            param -= step.astype(param.dtype, copy=False)
    return model, state


def _center_crop(values: np.ndarray, size: int | None) -> np.ndarray:
    if size is None:
        return values
    h, w = values.shape[-2:]
    size = min(size, h, w)
    top = (h - size) // 2
    left = (w - size) // 2
    return values[..., top : top + size, left : left + size]


#: chips per calibration batch and number of batches; 8 full chips per
#: batch keep the activation caches of the statistics forward small
_CALIB_BATCH = 8
_CALIB_LIMIT = 4


def calibrate_stats(model: Model, records, crop: int | None = None) -> None:
    """Freeze normalisation statistics from clean forward passes.

    Replaces the momentum-accumulated running estimates — which lag the
    weights they were collected under — with the exact average of the
    batch statistics of up to ``_CALIB_LIMIT`` deterministic, unaugmented
    batches under the current weights.  Inference-mode normalisation then
    reflects the weights actually deployed.
    """
    norms = [layer for layer in model.layers if isinstance(layer, BatchNorm2d)]
    records = list(records)
    if not norms or not records:
        return
    saved = [n.momentum for n in norms]
    try:
        for i, start in enumerate(range(0, len(records), _CALIB_BATCH)):
            if i == _CALIB_LIMIT:
                break
            chunk = records[start : start + _CALIB_BATCH]
            x = np.stack([_center_crop(minmax_image(r.image.data), crop)
                          for r in chunk])
            for n in norms:
                n.momentum = 1.0 / (i + 1)
            model.forward(x, training=True)
            model._fwd_meta = None
    finally:
        for n, m in zip(norms, saved):
            n.momentum = m
        for layer in model.layers:
            layer.clear_cache()


def _eval_pass(model: Model, records, batch: int, crop: int | None):
    """Deterministic loss + pooled confusion on a split (eval mode)."""
    counts = ConfusionCounts()
    loss_sum = 0.0
    n_pix = 0
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        xs = [_center_crop(minmax_image(r.image.data), crop) for r in chunk]
        ys = [_center_crop(r.label.values, crop).astype(np.float32) / 255.0 for r in chunk]
        x = np.stack(xs)
        y = np.stack(ys)
        p = model.forward(x, training=False)
        loss_sum += bce_loss(p, y) * p.size
        n_pix += p.size
        counts = counts + confusion(p >= 0.5, y >= PROB_CUTOFF)
    return loss_sum / max(n_pix, 1), counts


def train(spec: ModelSpec, records, cfg: TrainConfig, val_records=()):
    """Fit a model to chip records; returns ``(model, history)``.

    One epoch is a seeded shuffle pass over ``records`` in batches of
    ``cfg.batch`` with stochastic augmentation (stream ids advance per
    epoch, so no two batches ever share draws).  Training metrics pool
    the confusion counts of the augmented batches themselves; validation
    metrics come from a deterministic eval-mode pass.  The weights with
    the best validation F1 are restored at the end, and training stops
    early after ``cfg.patience`` epochs without improvement.  Without a
    validation split the training metrics drive both columns.

    After any training, the normalisation statistics are frozen by a
    :func:`calibrate_stats` pass under the restored weights, so the
    returned model's inference-mode normalisation is exact rather than a
    momentum estimate trailing the weight trajectory.

    On divergence the partial history is attached to the raised
    :class:`DivergenceError` as ``err.history``.
    """
    records = list(records)
    if not records:
        raise ArgumentError("training split is empty")
    val_records = list(val_records)
    model = build_model(spec, np.random.default_rng((cfg.seed, 0)))
    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history

    n = len(records)
    state = AdamState()
    best_f1 = -1.0
    best_weights: dict[str, np.ndarray] | None = None
    stale = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, 1, epoch)).permutation(n)
        lr = cfg.base_lr * cfg.lr_decay ** epoch
        loss_sum = 0.0
        n_pix = 0
        counts = ConfusionCounts()
        for start in range(0, n, cfg.batch):
            chunk = order[start : start + cfg.batch]
            batch_records = [records[i] for i in chunk]
            streams = [epoch * n + int(i) for i in chunk]
            x, y = augment_batch(batch_records, cfg.augment, indices=streams)
            try:
                loss, grads, p = loss_and_grads(model, x, y, return_probs=True)
            except DivergenceError as err:
                err.history = history
                raise
            optimizer_step(model, grads, state, cfg, lr=lr)
            loss_sum += loss * p.size
            n_pix += p.size
            counts = counts + confusion(p >= 0.5, y >= PROB_CUTOFF)
        train_loss = loss_sum / n_pix
        train_metrics = prf1(counts)

        if val_records:
            val_loss, val_counts = _eval_pass(model, val_records, cfg.batch, cfg.eval_crop)
            val_metrics = prf1(val_counts)
        else:
            val_loss, val_metrics = train_loss, train_metrics
        history.append(train_loss, train_metrics, val_loss, val_metrics)

        monitor = val_metrics[2]
        if monitor > best_f1 + 1e-4:
            best_f1 = monitor
            best_weights = model.get_weights()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_weights is not None:
        model.set_weights(best_weights)
    calibrate_stats(model, records,
                    crop=256 if cfg.eval_crop is None else cfg.eval_crop)
    return model, history
