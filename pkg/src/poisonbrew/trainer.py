"""From-scratch training: SGD + Nesterov momentum, weight decay, step LR drops,
per-epoch reshuffling and flip/crop augmentation, with an optional
batch-level DP-SGD defense (clip to C, add Gaussian noise)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import NonFiniteError, Tensor
from .datapipe import Dataset, augment_batch, default_pad, sample_augment
from .rng import stream


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters at full scale plus an epoch-scale factor.

    ``epochs`` and ``drop_epochs`` are stated for the full 40-epoch schedule;
    the effective run uses ``round(epochs * epoch_scale)`` epochs with the
    drop epochs rescaled by the same factor.
    """

    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.01
    drop_epochs: tuple[int, ...] = (14, 24, 35)
    drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True
    seed: int = 0
    epoch_scale: float = 0.25
    keep_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "drop_epochs", tuple(int(d) for d in self.drop_epochs))
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if any(b <= a for a, b in zip(self.drop_epochs, self.drop_epochs[1:])):
            raise ValueError("drop_epochs must be strictly increasing")
        if self.drop_epochs and self.drop_epochs[-1] >= self.epochs:
            raise ValueError("drop_epochs must be < epochs")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.epoch_scale <= 0:
            raise ValueError("epoch_scale must be positive")

    @property
    def run_epochs(self) -> int:
        return _round_half_up(self.epochs * self.epoch_scale)

    @property
    def run_drop_epochs(self) -> tuple[int, ...]:
        """Rescaled drop epochs; collisions after rounding are merged."""
        drops = sorted({_round_half_up(d * self.epoch_scale) for d in self.drop_epochs})
        return tuple(d for d in drops if d < self.run_epochs)

    def lr_at(self, epoch: int) -> float:
        n = sum(1 for d in self.run_drop_epochs if d <= epoch)
        return self.lr * self.drop_factor ** n


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class DPConfig:
    clip: float = 1.0
    sigma: float = 0.0
    enabled: bool = False

    def __post_init__(self):
        if self.clip <= 0 or self.sigma < 0:
            raise ValueError("DP clip must be > 0 and sigma >= 0")


def dp_sgd_step(grad: np.ndarray, dp: DPConfig, gen: np.random.Generator) -> np.ndarray:
    """Clip the batch gradient to l2 norm <= C, then add N(0, (sigma*C)^2) per coordinate."""
    g = np.asarray(grad, dtype=np.float64)
    norm = float(np.sqrt(np.dot(g, g)))
    if norm > dp.clip:
        g = g * (dp.clip / norm)
    if dp.sigma > 0:
        g = g + gen.normal(0.0, dp.sigma * dp.clip, size=g.shape)
    return g


@dataclass
class TrainTrace:
    train_loss: list[float]
    val_acc: list[float]
    lrs: list[float]
    params: nn.ModelParams
    monitors: dict[str, list[float]] = field(default_factory=dict)
    train_size: int = 0

    def write_csv(self, path) -> None:
        keys = sorted(self.monitors)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "val_acc", *keys])
            for e in range(len(self.train_loss)):
                row = [e, repr(self.lrs[e]), repr(self.train_loss[e]),
                       repr(self.val_acc[e]) if self.val_acc else ""]
                w.writerow(row + [repr(self.monitors[k][e]) for k in keys])


def batch_gradient(spec: nn.ModelSpec, flat: np.ndarray, images: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its flat parameter gradient (no weight decay)."""
    layout = spec.layout()
    ws = [Tensor(p, requires_grad=True) for p in layout.split(flat)]
    loss = ag.cross_entropy(nn.forward(spec, ws, Tensor(images)), labels)
    gv = ag.backward(loss, ws, layout)
    return float(loss.data), gv.values


def accuracy(params: nn.ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(nn.predict(params, data.images) == data.labels))


def train_victim(train: Dataset, spec: nn.ModelSpec, config: TrainConfig, dp: DPConfig | None = None,
                 hooks: Sequence = (), validation: Dataset | None = None) -> TrainTrace:
    """Train a freshly initialised model on ``train`` (possibly poisoned).

    Hooks receive ``on_batch(epoch, flat_params, batch_grad, lr)`` before the
    update and ``on_epoch_end(epoch)``; a hook's ``export()`` dict is stored in
    ``TrainTrace.monitors``.
    """
    seed = config.seed
    if config.keep_fraction < 1.0:
        keep = _round_half_up(config.keep_fraction * len(train))
        rows = np.sort(stream(seed, "keep").choice(len(train), size=keep, replace=False))
        train = train.subset(rows)
    params = nn.build(spec, seed)
    flat = params.flat.copy()
    momentum = np.zeros_like(flat)
    n = len(train)
    pad = default_pad(train.image_shape[0])
    losses, accs, lrs = [], [], []
    for epoch in range(config.run_epochs):
        lr = config.lr_at(epoch)
        order = stream(seed, "shuffle", epoch).permutation(n)
        images = train.images[order]
        labels = train.labels[order]
        if config.augment:
            images = augment_batch(images, sample_augment(stream(seed, "augment", epoch), n, pad))
        total, count = 0.0, 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            xb = images[start:start + config.batch_size]
            yb = labels[start:start + config.batch_size]
            try:
                loss, g = batch_gradient(spec, flat, xb, yb)
            except NonFiniteError as err:
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, step {step}: {err}") from err
            for h in hooks:
                h.on_batch(epoch, flat, g, lr)
            if dp is not None and dp.enabled:
                g = dp_sgd_step(g, dp, stream(seed, "dp", epoch, step))
            g = g + config.weight_decay * flat
            momentum = config.momentum * momentum + g
            flat = flat - lr * (g + config.momentum * momentum)
            if not np.isfinite(flat).all():
                raise TrainingDiverged(f"parameters became non-finite at epoch {epoch}, step {step}")
            total += loss * len(yb)
            count += len(yb)
        losses.append(total / max(count, 1))
        lrs.append(lr)
        if validation is not None:
            accs.append(accuracy(params.replace(flat), validation))
        for h in hooks:
            h.on_epoch_end(epoch)
    monitors: dict[str, list[float]] = {}
    for h in hooks:
        if hasattr(h, "export"):
            monitors.update(h.export())
    return TrainTrace(losses, accs, lrs, params.replace(flat), monitors, n)


def pretrain_clean(train: Dataset, spec: nn.ModelSpec, config: TrainConfig,
                   validation: Dataset | None = None) -> nn.ModelParams:
    return train_victim(train, spec, config, None, (), validation).params
