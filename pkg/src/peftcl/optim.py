"""SGD with momentum and AdamW, with an optional per-epoch cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str = "sgd"  # "sgd" | "adamw"
    learning_rate: float = 0.001
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"  # "constant" | "cosine"
    t_max: int = 1
    eta_min: float = 0.0
    epoch: int = 0
    # id(param) -> (param, buffers); holding the param keeps the id stable
    buffers: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def current_lr(self) -> float:
        return scheduled_lr(self, self.epoch)

    def advance_epoch(self) -> None:
        self.epoch += 1


def scheduled_lr(state: OptimizerState, epoch: int) -> float:
    if state.schedule == "constant":
        return state.learning_rate
    t = min(epoch, state.t_max)
    cos = 0.5 * (1.0 + math.cos(math.pi * t / state.t_max))
    return state.eta_min + (state.learning_rate - state.eta_min) * cos


def optimizer_step(params: Iterable[Tensor], state: OptimizerState) -> None:
    """Apply one update to every param holding a gradient.

    Params with ``grad is None`` are skipped entirely, including weight
    decay and moment updates, so parameters that took no part in the step
    stay bitwise unchanged.
    """
    lr = state.current_lr()
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ValueError(f"grad shape {p.grad.shape} != param shape {p.data.shape}")
        slot = state.buffers.get(id(p))
        if state.kind == "sgd":
            g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
            if state.momentum:
                if slot is None:
                    v = np.array(g, dtype=np.float64)
                else:
                    v = state.momentum * slot[1] + g
                state.buffers[id(p)] = (p, v)
                g = v
            p.data -= lr * g
        else:
            if slot is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                t = 0
            else:
                _, m, v, t = slot
            t += 1
            m = state.beta1 * m + (1.0 - state.beta1) * p.grad
            v = state.beta2 * v + (1.0 - state.beta2) * p.grad * p.grad
            state.buffers[id(p)] = (p, m, v, t)
            if state.weight_decay:
                p.data -= lr * state.weight_decay * p.data
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
