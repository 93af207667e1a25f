import math

import numpy as np
import pytest

from conftest import TINY_TEXT
from peftcl.config import parse_config
from peftcl.runner import (RunError, joint_train, load_state, method_trainable_params, metrics_csv, predict,
                           prepare, pretrain_backbone, run_scenario, save_state)
from peftcl.vit import count_trainable_params


@pytest.fixture(scope="module")
def cfg():
    return parse_config(text=TINY_TEXT)


@pytest.fixture(scope="module")
def base(cfg):
    params, log = pretrain_backbone(cfg, 0)
    assert params.frozen and params.head is None and len(log) > 0
    return params


@pytest.fixture(scope="module")
def tasks(cfg):
    return prepare(cfg, 0)


def defined(R):
    return [int((~np.isnan(row)).sum()) for row in R]


@pytest.mark.parametrize("method", ["s_lora", "s_prompts", "l2l", "l2p", "finetune"])
def test_rows_fill_lower_triangle(cfg, base, tasks, method):
    record, _ = run_scenario(cfg.with_values(method={"name": method}), tasks, base, 0)
    assert defined(record.accuracy.R) == [1, 2]
    assert np.all((record.accuracy.R[~np.isnan(record.accuracy.R)] >= 0) &
                  (record.accuracy.R[~np.isnan(record.accuracy.R)] <= 1))
    metrics = {m for *_, m, _ in record.metric_rows()}
    assert {"avg_accuracy", "forgetting", "backward_transfer", "trainable_params"} <= metrics
    assert ("expert_selection_accuracy" in metrics) == method.startswith("s_")


def test_single_task_stream(base):
    one = parse_config(text=TINY_TEXT + "stream.num_tasks = 1\n")
    record, _ = run_scenario(one, prepare(one, 0), base, 0)
    assert record.accuracy.R.shape == (1, 1)
    assert "forgetting" not in {r[4] for r in record.metric_rows()}


def test_run_is_seed_deterministic(cfg, base, tasks):
    a, _ = run_scenario(cfg, tasks, base, 0)
    b, _ = run_scenario(cfg, tasks, base, 0)
    assert np.array_equal(a.accuracy.correct, b.accuracy.correct)
    assert a.loss_curve == b.loss_curve
    assert metrics_csv(a.metric_rows()) == metrics_csv(b.metric_rows())


def test_forced_routing_keeps_columns_constant(cfg, base, tasks):
    forced = cfg.with_values(method={"name": "s_lora", "forced_routing": True})
    record, state = run_scenario(forced, tasks, base, 0)
    R = record.accuracy.R
    assert R[1, 0] == R[0, 0]
    assert record.variant == "forced"


def test_metrics_recomputable_from_matrix(cfg, base, tasks):
    record, _ = run_scenario(cfg, tasks, base, 0)
    rows = {m: v for *_, ti, m, v in record.metric_rows() if ti == 1}
    c, n = record.accuracy.correct[1], record.accuracy.test_sizes
    assert abs(rows["avg_accuracy"] - c.sum() / n.sum()) < 1e-12
    R = record.accuracy.R
    assert abs(rows["backward_transfer"] - (R[1, 0] - R[0, 0])) < 1e-12


def test_joint_fills_only_last_row(cfg, base, tasks):
    record, _ = joint_train(cfg, tasks, "lora", base, 0)
    assert defined(record.accuracy.R) == [0, 2]
    union = sum(t.n_train for t in tasks)
    steps = [s for s, split, *_ in record.loss_curve if split == "train"]
    batch = cfg.joint_train.batch_size
    assert len(steps) == cfg.joint_train.epochs * math.ceil(union / batch)
    splits = [split for _, split, *_ in record.loss_curve]
    assert splits[-2:] == ["train_final", "test"]
    assert record.final_average_accuracy() == record.extras["test_accuracy"]


def test_joint_trainable_counts(cfg, base, tasks):
    vcfg = cfg.vit_config()
    D, C = vcfg.hidden_dim, vcfg.num_classes
    prompt, model = joint_train(cfg, tasks, "prompt", base, 0)
    assert prompt.trainable_params == cfg.peft.prompt_length * D + D * C + C
    assert sum(t.size for t in model.trainable()) == prompt.trainable_params
    full, model = joint_train(cfg, tasks, "full", base, 0)
    assert full.trainable_params == count_trainable_params("full", vcfg, num_classes=C)
    assert sum(t.size for t in model.trainable()) == full.trainable_params
    assert all(np.array_equal(a, b) for a, b in
               zip([t.data for t in base.backbone_tensors()], [t.data for t in pretrain_backbone(cfg, 0)[0]
                                                               .backbone_tensors()]))
    with pytest.raises(RunError):
        joint_train(cfg, tasks, "adapter", base, 0)


def test_sx_trainable_param_formula(cfg, tasks):
    D = cfg.vit_config().hidden_dim
    per = cfg.peft.rank * len(cfg.peft.targets) * cfg.model.num_layers * 2 * D
    heads = sum((D + 1) * len(t.classes) for t in tasks)
    assert method_trainable_params(cfg, tasks) == len(tasks) * per + heads


@pytest.mark.parametrize("method", ["s_prompts", "l2l", "finetune"])
def test_state_round_trip(tmp_path, cfg, base, tasks, method):
    mcfg = cfg.with_values(method={"name": method})
    _, state = run_scenario(mcfg, tasks, base, 0)
    save_state(tmp_path / "s", state)
    back = load_state(tmp_path / "s", base, mcfg.vit_config())
    x = np.concatenate([t.test_x for t in tasks])
    assert np.array_equal(predict(state, x, mcfg), predict(back, x, mcfg))


def test_metrics_csv_format():
    text = metrics_csv([("s_lora", "base", 0, 1, "avg_accuracy", 2 / 3)])
    assert text == "method,variant,seed,task_index,metric,value\ns_lora,base,0,1,avg_accuracy,0.666667\n"
    with pytest.raises(RunError):
        metrics_csv([("s_lora", "base", 0, 1, "accuracy", 1.0)])
