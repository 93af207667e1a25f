import math

import numpy as np
import pytest

from peftcl.optim import OptimizerState, optimizer_step, scheduled_lr
from peftcl.tensor import Tensor
from peftcl.train import TrainConfig, epoch_batches, fit


def param(value, grad):
    p = Tensor(np.atleast_1d(np.asarray(value, dtype=float)), requires_grad=True)
    p.grad = np.atleast_1d(np.asarray(grad, dtype=float))
    return p


def test_sgd_plain_step():
    p = param(1.0, 1.0)
    optimizer_step([p], OptimizerState("sgd", learning_rate=0.1))
    assert p.data.tolist() == [0.9]


def test_sgd_momentum_second_step():
    lr = 0.1
    state = OptimizerState("sgd", learning_rate=lr, momentum=0.9)
    p = param(0.0, 1.0)
    optimizer_step([p], state)
    first = p.data.copy()
    p.grad = np.array([1.0])
    optimizer_step([p], state)
    assert abs((first - p.data)[0] - lr * 1.9) < 1e-15


def test_sgd_weight_decay_folded_into_gradient():
    p = param(2.0, 0.0)
    optimizer_step([p], OptimizerState("sgd", learning_rate=0.5, weight_decay=0.1))
    assert abs(p.data[0] - (2.0 - 0.5 * 0.2)) < 1e-15


def test_adamw_first_step_and_decoupled_decay():
    lr, wd = 0.01, 0.1
    p = param(1.0, 3.0)
    optimizer_step([p], OptimizerState("adamw", learning_rate=lr, weight_decay=wd))
    # bias-corrected first step moves by lr * g/|g|, decay applied to the old value
    expected = 1.0 - lr * wd * 1.0 - lr * 3.0 / (3.0 + 1e-8)
    assert abs(p.data[0] - expected) < 1e-12


def test_params_without_grad_untouched():
    p = param(1.0, 1.0)
    q = Tensor(np.array([5.0]), requires_grad=True)
    state = OptimizerState("adamw", learning_rate=0.1, weight_decay=0.5)
    optimizer_step([p, q], state)
    assert q.data.tolist() == [5.0] and id(q) not in state.buffers


def test_cosine_schedule_endpoints():
    state = OptimizerState(learning_rate=0.1, schedule="cosine", t_max=50, eta_min=0.001)
    assert scheduled_lr(state, 0) == 0.1
    assert abs(scheduled_lr(state, 50) - 0.001) < 1e-15
    mid = 0.001 + (0.1 - 0.001) * 0.5 * (1 + math.cos(math.pi * 10 / 50))
    assert abs(scheduled_lr(state, 10) - mid) < 1e-15


def test_invalid_state():
    with pytest.raises(ValueError):
        OptimizerState("rmsprop")
    with pytest.raises(ValueError):
        OptimizerState(learning_rate=0.0)


def test_epoch_batches_cover_every_sample():
    batches = epoch_batches(37, 8, 0, "x")
    assert sorted(np.concatenate(batches).tolist()) == list(range(37))
    assert [len(b) for b in batches] == [8, 8, 8, 8, 5]


def test_fit_decreases_quadratic_loss():
    from peftcl import tensor as T

    target = np.linspace(-1, 1, 10)
    w = Tensor(np.zeros(10), requires_grad=True)

    def loss_fn(idx):
        diff = T.getitem(w, idx) - Tensor(target[idx])
        return T.mean(T.square(diff)), 0.0

    log = fit([w], loss_fn, 10, TrainConfig(epochs=30, lr=0.1, batch_size=5, weight_decay=0.0,
                                                schedule="constant"), 0)
    assert log[-1].loss < 1e-3 * log[0].loss
    assert w.grad is None
