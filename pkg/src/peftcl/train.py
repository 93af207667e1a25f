"""Minibatch training loop shared by every strategy."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .optim import OptimizerState, optimizer_step
from .rng import make_rng
from .tensor import Tape, Tensor, backward, zero_grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.001
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 128
    schedule: str = "cosine"
    t_max: int | None = None
    eta_min: float = 0.0

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


SX_TRAIN = TrainConfig()
L2P_TRAIN = TrainConfig(epochs=5, lr=0.001875, optimizer="adamw", momentum=0.0, weight_decay=0.0,
                        batch_size=16, schedule="constant")
L2L_TRAIN = TrainConfig(epochs=5, lr=0.001875, optimizer="sgd", momentum=0.9, weight_decay=0.0,
                        batch_size=16, schedule="constant")


def make_optimizer(cfg: TrainConfig) -> OptimizerState:
    return OptimizerState(kind=cfg.optimizer, learning_rate=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay, schedule=cfg.schedule,
                          t_max=cfg.t_max or cfg.epochs, eta_min=cfg.eta_min)


def epoch_batches(n: int, batch_size: int, seed: int, *stream: object) -> list[np.ndarray]:
    order = make_rng(seed, "shuffle", *stream).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class StepLog:
    step: int
    loss: float
    accuracy: float


LossFn = Callable[[np.ndarray], tuple[Tensor, float]]


def fit(params: Sequence[Tensor], loss_fn: LossFn, n: int, cfg: TrainConfig, seed: int,
        *stream: object) -> list[StepLog]:
    """Run ``cfg.epochs`` shuffled passes over ``n`` samples.

    ``loss_fn(indices)`` returns the batch loss and batch accuracy. The
    schedule advances once per epoch.
    """
    opt = make_optimizer(cfg)
    log: list[StepLog] = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(n, cfg.batch_size, seed, *stream, epoch):
            zero_grads(params)
            with Tape() as tape:
                loss, acc = loss_fn(idx)
            backward(loss, tape)
            optimizer_step(params, opt)
            log.append(StepLog(step, loss.item(), acc))
            step += 1
        opt.advance_epoch()
    zero_grads(params)
    return log
