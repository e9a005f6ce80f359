"""Mini-batch training (Adam or SGD with momentum) with a cosine learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, TrainingError
from .net import CodaNet, loss, one_hot

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    cosine: bool = True


class SGD:
    """``v <- mu v + g``; ``p <- p - lr v``.  Updates rebind ``p.data`` (no in-place writes)."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            v = self.momentum * self.velocity[i] + p.grad
            self.velocity[i] = v
            p.data = (p.data - self.lr * v).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction; same interface as :class:`SGD`."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * p.grad
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * p.grad * p.grad
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(params, config: "TrainConfig"):
    if config.optimizer == "sgd":
        return SGD(params, config.lr, config.momentum)
    if config.optimizer == "adam":
        return Adam(params, config.lr)
    raise ContractError(f"unknown optimizer {config.optimizer!r}; expected 'sgd' or 'adam'")


def accuracy(net: CodaNet, images, labels, batch_size: int = 256) -> float:
    was_training = net.training
    net.eval()
    try:
        pred = net.predict(images, batch_size).argmax(axis=1)
    finally:
        net.training = was_training
    return float((pred == np.asarray(labels)).mean())


def train(net: CodaNet, dataset, config: TrainConfig | None = None, epochs: int | None = None,
          eval_set=None):
    """Train ``net`` in place on ``dataset`` (a :class:`~codanets.data.LabeledImageSet`).

    Returns ``(net, history)``.  ``history`` has one dict per epoch with the
    mean training loss, the training accuracy at the end of the epoch and,
    when ``eval_set`` is given, the accuracy on it.
    """
    config = config or TrainConfig()
    epochs = config.epochs if epochs is None else epochs
    images = np.asarray(dataset.images, dtype=tn.get_dtype())
    labels = np.asarray(dataset.labels)
    n = len(images)
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    if config.batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {config.batch_size}")
    targets = one_hot(labels, net.num_classes)
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(net.parameters(), config)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = max(epochs * steps_per_epoch, 1)
    history, step = [], 0
    for epoch in range(epochs):
        net.train()
        order = rng.permutation(n)
        loss_sum = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            if config.cosine:
                opt.lr = 0.5 * config.lr * (1.0 + math.cos(math.pi * step / total))
            opt.zero_grad()
            value = loss(net, images[idx], targets[idx])
            if not np.isfinite(value.item()):
                raise TrainingError(f"non-finite loss {value.item()} at epoch {epoch}, step {step}")
            value.backward()
            opt.step()
            loss_sum += value.item() * len(idx)
            step += 1
        net.eval()
        record = {"epoch": epoch + 1, "loss": loss_sum / n,
                  "accuracy": accuracy(net, images, labels)}
        if eval_set is not None:
            record["eval_accuracy"] = accuracy(net, eval_set.images, eval_set.labels)
        history.append(record)
        logger.info("epoch %d: %s", epoch + 1, record)
    net.eval()
    return net, history
