"""Momentum SGD with exponential learning-rate decay and the two training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import numerics as nx
from ..kpnet import SegmentationNet
from ..mprm import MPRMNet
from ..numerics import Module, Tensor
from .config import Config
from .data import Batch, Item, make_batches

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


def learning_rate(epoch: float, initial: float = 0.01, decay_epochs: float = 100.0) -> float:
    """Exponential decay dividing the rate by ten every ``decay_epochs``."""
    return initial * 10.0 ** (-epoch / decay_epochs)


class MomentumSGD:
    """``v <- m v - lr g``; ``theta <- theta + v``."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.98, clip: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        factor = 1.0
        if self.clip > 0 and norm > self.clip:
            factor = self.clip / norm
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v -= lr * factor * g
            p.data += v
        return norm


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    path_loss: list[dict[str, float]] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch_loss": self.epoch_loss, "path_loss": self.path_loss, "learning_rate": self.learning_rates}


def _epoch_batches(items: Sequence[Item], limit: int, rng: np.random.Generator) -> list[Batch]:
    order = rng.permutation(len(items))
    return make_batches([items[k] for k in order], limit)


def _fit(
    model: Module,
    items: Sequence[Item],
    config: Config,
    epochs: int,
    batch_loss: Callable[[Batch], tuple[Tensor, dict[str, float]]],
    rng: np.random.Generator,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainLog:
    opt = MomentumSGD(model.parameters(), config.momentum, config.grad_clip)
    history = TrainLog()
    model.train()
    for epoch in range(epochs):
        lr = learning_rate(epoch, config.learning_rate, config.lr_decay_epochs)
        total = 0.0
        parts: dict[str, float] = {}
        points = 0
        for batch in _epoch_batches(items, config.batch_limit, rng):
            opt.zero_grad()
            loss, detail = batch_loss(batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"epoch {epoch}: loss became {value} (lr={lr:g})")
            loss.backward()
            opt.step(lr)
            w = len(batch.items)
            total += value * w
            points += w
            for k, v in detail.items():
                parts[k] = parts.get(k, 0.0) + v * w
        history.epoch_loss.append(total / points)
        history.path_loss.append({k: v / points for k, v in parts.items()})
        history.learning_rates.append(lr)
        log.info("epoch %d lr %.5f loss %.5f", epoch, lr, history.epoch_loss[-1])
        if on_epoch is not None:
            on_epoch(epoch, history.epoch_loss[-1])
    model.eval()
    return history


def train_classifier(items: Sequence[Item], config: Config, epochs: int | None = None, on_epoch=None) -> tuple[MPRMNet, TrainLog]:
    """Train the multi-path classifier with the summed per-path sigmoid losses."""
    rng = np.random.default_rng(config.seed)
    model = MPRMNet(config.classifier_plan(), np.random.default_rng(config.seed + 1), config.train_paths, config.dropout)

    def batch_loss(batch: Batch):
        return model.loss(batch.geometry(), Tensor(batch.features()), batch.weak_labels())

    history = _fit(model, items, config, config.cls_epochs if epochs is None else epochs, batch_loss, rng, on_epoch)
    return model, history


def train_segmenter(items: Sequence[Item], config: Config, epochs: int | None = None, on_epoch=None) -> tuple[SegmentationNet, TrainLog]:
    """Per-point softmax cross-entropy on (pseudo) labels."""
    rng = np.random.default_rng(config.seed)
    model = SegmentationNet(config.segmenter_plan(), np.random.default_rng(config.seed + 1))

    def batch_loss(batch: Batch):
        logits = model(batch.geometry(), Tensor(batch.features()))
        loss = nx.softmax_cross_entropy(logits, batch.point_labels())
        return loss, {}

    history = _fit(model, items, config, config.seg_epochs if epochs is None else epochs, batch_loss, rng, on_epoch)
    return model, history
