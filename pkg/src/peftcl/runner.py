"""Scenario runner: pretraining, sequential CL runs, joint training, records.

A run trains tasks in order and, after each task ``i``, evaluates every
test set ``j <= i`` to fill row ``i`` of the accuracy matrix.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import TaskData, make_pretext, make_stream
from .l2x import AdapterPool, init_pool, l2x_predict, l2x_train_task
from .metrics import AccuracyMatrix, backward_transfer, conditional_accuracy, forgetting
from .peft import (AdapterSet, adapted_features, init_lora, init_prompt, payload_from_named,
                   payload_meta, payload_to_named)
from .sx import ExpertRegistry, select_expert, sx_predict, sx_train_task
from .tensor import Tensor
from .train import StepLog, TrainConfig, fit
from .vit import (Head, ViTConfig, ViTParams, classify, count_trainable_params, init_head, init_vit,
                  params_from_named, patchify_embed, vit_forward)

SX_METHODS = ("s_prompts", "s_lora")
L2X_METHODS = ("l2p", "l2l")
JOINT_MODES = ("prompt", "lora", "full")
METRIC_NAMES = ("avg_accuracy", "forgetting", "backward_transfer", "expert_selection_accuracy",
                "throughput_best", "throughput_avg", "trainable_params")
METRICS_HEADER = ("method", "variant", "seed", "task_index", "metric", "value")
LOSS_HEADER = ("step", "split", "loss", "accuracy")


class RunError(RuntimeError):
    pass


def peft_kind(method: str) -> str:
    return "prompt" if method in ("s_prompts", "l2p", "joint_prompt") else "lora"


def variant_name(cfg: ExperimentConfig) -> str:
    flags = []
    if cfg.method.name in SX_METHODS:
        if cfg.method.plus_plus:
            flags.append("plusplus")
        if cfg.method.shared_head:
            flags.append("shared_head")
        if cfg.method.forced_routing:
            flags.append("forced")
    return "+".join(flags) or "base"


@dataclass
class RunRecord:
    method: str
    variant: str
    seed: int
    config_hash: str
    accuracy: AccuracyMatrix
    trainable_params: int
    wall_clock: list[float] = field(default_factory=list)
    loss_curve: list[tuple[int, str, float, float]] = field(default_factory=list)
    selection_accuracy: list[float | None] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return self.accuracy.num_tasks

    def final_average_accuracy(self) -> float:
        return self.accuracy.row_average(self.num_tasks - 1)

    def metric_rows(self) -> list[tuple]:
        rows = []
        R = self.accuracy
        for i in range(R.num_tasks):
            if R.correct[i, 0] < 0:
                continue
            rows.append((i, "avg_accuracy", R.row_average(i)))
            if i < len(self.selection_accuracy) and self.selection_accuracy[i] is not None:
                rows.append((i, "expert_selection_accuracy", self.selection_accuracy[i]))
        last = R.num_tasks - 1
        full = all(R.correct[i, 0] >= 0 for i in range(R.num_tasks))
        if R.num_tasks >= 2 and full:
            rows.append((last, "forgetting", forgetting(R.R)))
            rows.append((last, "backward_transfer", backward_transfer(R.R)))
        rows.append((last, "trainable_params", self.trainable_params))
        return [(self.method, self.variant, self.seed, i, m, v) for i, m, v in rows]


def format_value(value) -> str:
    return f"{float(value):.6g}"


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for method, variant, seed, task_index, metric, value in rows:
        if metric not in METRIC_NAMES:
            raise RunError(f"unknown metric {metric!r}")
        w.writerow((method, variant, seed, task_index, metric, format_value(value)))
    return buf.getvalue()


def loss_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_HEADER)
    for step, split, loss, acc in curve:
        w.writerow((step, split, format_value(loss), format_value(acc)))
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise RunError(f"{path}: header {reader.fieldnames} != {METRICS_HEADER}")
        return list(reader)


# ---------------------------------------------------------------- pretrain

def pretrain_backbone(cfg: ExperimentConfig, seed: int) -> tuple[ViTParams, list[StepLog]]:
    """Fit the whole ViT on the pretext split, drop its head, freeze it."""
    vcfg = cfg.vit_config()
    pretext = make_pretext(cfg.stream_spec(), seed)
    params = init_vit(vcfg, seed, with_head=False)
    head = init_head(vcfg.hidden_dim, len(pretext.classes), seed, "pretext")
    trainable = params.backbone_tensors() + head.tensors()

    def loss_fn(idx):
        feats = vit_forward(patchify_embed(pretext.train_x[idx], vcfg, params), params, vcfg)
        logits = classify(feats, head)
        loss = T.cross_entropy_masked(logits, pretext.train_y[idx])
        return loss, float((logits.data.argmax(axis=1) == pretext.train_y[idx]).mean())

    log = fit(trainable, loss_fn, pretext.n_train, cfg.pretrain, seed, "pretrain")
    params.freeze()
    return params, log


def save_backbone(path, params: ViTParams, vcfg: ViTConfig) -> None:
    meta = {"num_layers": vcfg.num_layers, "hidden_dim": vcfg.hidden_dim}
    save_checkpoint(path, params.named_tensors(include_head=False), meta)


def load_backbone(path) -> ViTParams:
    named, meta = load_checkpoint(path)
    params = params_from_named({k: Tensor(v) for k, v in named.items()}, int(meta["num_layers"]))
    params.freeze()
    return params


# ---------------------------------------------------------------- builders

def build_state(cfg: ExperimentConfig, base: ViTParams, seed: int):
    """Fresh method state: a registry, a pool, or a full model + head."""
    vcfg = cfg.vit_config()
    name = cfg.method.name
    if name in SX_METHODS:
        return ExpertRegistry(base, vcfg, peft_kind(name), vcfg.num_classes, seed=seed,
                              k=cfg.effective_k(), plus_plus=cfg.method.plus_plus,
                              shared_head=cfg.method.shared_head,
                              prompt_length=cfg.peft.prompt_length, rank=cfg.peft.rank,
                              targets=cfg.peft.targets, lora_alpha=cfg.peft.lora_alpha)
    if name in L2X_METHODS:
        return init_pool(cfg.l2x.pool_size, peft_kind(name), vcfg, base, seed,
                         select_count=cfg.l2x.select_count, lam=cfg.l2x.lam,
                         prompt_length=cfg.peft.prompt_length, rank=cfg.peft.rank,
                         targets=cfg.peft.targets, lora_alpha=cfg.peft.lora_alpha,
                         surrogate=cfg.l2x.surrogate)
    if name == "finetune":
        model = base.copy()
        model.unfreeze()
        model.head = init_head(vcfg.hidden_dim, vcfg.num_classes, seed, "finetune")
        return FinetuneState(model, vcfg)
    raise RunError(f"{name} is not a sequential method")


@dataclass
class FinetuneState:
    model: ViTParams
    cfg: ViTConfig
    seen_classes: list[int] = field(default_factory=list)


def finetune_train_task(task: TaskData, state: FinetuneState, train_cfg: TrainConfig,
                        seed: int) -> list[StepLog]:
    model, vcfg = state.model, state.cfg
    params = model.backbone_tensors() + model.head.tensors()

    def loss_fn(idx):
        feats = vit_forward(patchify_embed(task.train_x[idx], vcfg, model), model, vcfg)
        logits = classify(feats, model.head)
        loss = T.cross_entropy_masked(logits, task.train_y[idx])
        return loss, float((logits.data.argmax(axis=1) == task.train_y[idx]).mean())

    log = fit(params, loss_fn, task.n_train, train_cfg, seed, "finetune", task.task_id)
    state.seen_classes = sorted(set(state.seen_classes) | set(task.classes))
    return log


def finetune_predict(images, state: FinetuneState, chunk: int = 256) -> np.ndarray:
    seen = np.array(state.seen_classes)
    out = []
    for i in range(0, len(images), chunk):
        x = patchify_embed(images[i:i + chunk], state.cfg, state.model)
        logits = classify(vit_forward(x, state.model, state.cfg), state.model.head).data
        out.append(seen[logits[:, seen].argmax(axis=1)])
    return np.concatenate(out)


def method_trainable_params(cfg: ExperimentConfig, tasks: list[TaskData]) -> int:
    """Trainable parameters held by the method after training on ``tasks``."""
    num_tasks = len(tasks)
    vcfg = cfg.vit_config()
    name = cfg.method.name
    D = vcfg.hidden_dim
    kind = peft_kind(name)
    per = (cfg.peft.prompt_length * D if kind == "prompt"
           else vcfg.num_layers * len(cfg.peft.targets) * cfg.peft.rank * 2 * D)
    if name in SX_METHODS:
        if cfg.method.shared_head:
            return num_tasks * per + D * vcfg.num_classes + vcfg.num_classes
        return sum(per + (D + 1) * len(t.classes) for t in tasks)
    if name in L2X_METHODS:
        return cfg.l2x.pool_size * (per + D) + D * vcfg.num_classes + vcfg.num_classes
    if name == "finetune":
        return count_trainable_params("full", vcfg)
    raise RunError(name)


# ---------------------------------------------------------------- scenario

def train_task(state, task: TaskData, cfg: ExperimentConfig, seed: int) -> list[StepLog]:
    name = cfg.method.name
    tc = cfg.train_config_for(name)
    if name in SX_METHODS:
        return sx_train_task(task, state, tc, seed, cfg.stream.scenario)
    if name in L2X_METHODS:
        return l2x_train_task(task, state, tc, seed, cfg.stream.scenario)
    return finetune_train_task(task, state, tc, seed)


def predict(state, images, cfg: ExperimentConfig, experts=None) -> np.ndarray:
    if isinstance(state, ExpertRegistry):
        return sx_predict(images, state, experts)
    if isinstance(state, AdapterPool):
        return l2x_predict(images, state)
    return finetune_predict(images, state)


def run_scenario(cfg: ExperimentConfig, tasks: list[TaskData], base: ViTParams, seed: int,
                 state=None) -> tuple[RunRecord, object]:
    """Train ``tasks`` in order, filling the accuracy matrix after each one."""
    name = cfg.method.name
    if state is None:
        state = build_state(cfg, base, seed)
    R = AccuracyMatrix.empty([t.n_test for t in tasks])
    record = RunRecord(name, variant_name(cfg), seed, cfg.digest(), R, 0)
    step0 = 0
    forced = cfg.method.forced_routing and name in SX_METHODS
    for i, task in enumerate(tasks):
        started = time.perf_counter()
        log = train_task(state, task, cfg, seed)
        record.wall_clock.append(time.perf_counter() - started)
        record.loss_curve.extend((step0 + s.step, f"task{i}", s.loss, s.accuracy) for s in log)
        step0 += len(log)
        hits = total = 0
        for j in range(i + 1):
            test = tasks[j]
            experts = None
            if isinstance(state, ExpertRegistry):
                chosen = select_expert(test.test_x, state)
                hits += int((chosen == j).sum())
                total += len(chosen)
                experts = np.full(test.n_test, j) if forced else chosen
            preds = predict(state, test.test_x, cfg, experts)
            R.record(i, j, int((preds == test.test_y).sum()))
        record.selection_accuracy.append(hits / total if total else None)
    record.trainable_params = method_trainable_params(cfg, tasks)
    if isinstance(state, ExpertRegistry):
        record.extras["conditional"] = conditional_from_state(state, tasks)
    return record, state


def conditional_from_state(registry: ExpertRegistry, tasks: list[TaskData]):
    preds, labels, chosen, truth = [], [], [], []
    for j, task in enumerate(tasks):
        sel = select_expert(task.test_x, registry)
        preds.append(sx_predict(task.test_x, registry, sel))
        labels.append(task.test_y)
        chosen.append(sel)
        truth.append(np.full(task.n_test, j))
    return conditional_accuracy(np.concatenate(preds), np.concatenate(labels),
                                np.concatenate(chosen), np.concatenate(truth))


# ------------------------------------------------------------------- joint

@dataclass
class JointModel:
    mode: str
    base: ViTParams
    cfg: ViTConfig
    head: Head
    payload: object = None

    def trainable(self) -> list[Tensor]:
        own = [] if self.payload is None else list(self.payload.tensors())
        if self.mode == "full":
            own = self.base.backbone_tensors()
        return own + self.head.tensors()

    def logits(self, images) -> Tensor:
        if self.mode == "full":
            x = patchify_embed(images, self.cfg, self.base)
            return classify(vit_forward(x, self.base, self.cfg), self.head)
        return classify(adapted_features(images, self.base, self.cfg, self.payload), self.head)


def joint_model(mode: str, cfg: ExperimentConfig, base: ViTParams, seed: int,
                num_classes: int) -> JointModel:
    vcfg = cfg.vit_config()
    head = init_head(vcfg.hidden_dim, num_classes, seed, "joint")
    if mode == "full":
        model = base.copy()
        model.unfreeze()
        return JointModel(mode, model, vcfg, head)
    if mode == "prompt":
        payload = init_prompt(cfg.peft.prompt_length, vcfg.hidden_dim, seed, "joint")
    elif mode == "lora":
        payload = init_lora(cfg.peft.rank, cfg.peft.targets, vcfg.hidden_dim, vcfg.num_layers, seed,
                            "joint", alpha=cfg.peft.lora_alpha)
    else:
        raise RunError(f"unknown joint mode {mode!r}")
    return JointModel(mode, base, vcfg, head, payload)


def dataset_loss(model: JointModel, images, labels, chunk: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a whole split, no gradients."""
    total = correct = 0.0
    for i in range(0, len(images), chunk):
        logits = model.logits(images[i:i + chunk])
        y = labels[i:i + chunk]
        total += T.cross_entropy_masked(logits, y).item() * len(y)
        correct += float((logits.data.argmax(axis=1) == y).sum())
    return total / len(labels), correct / len(labels)


def joint_train(cfg: ExperimentConfig, tasks: list[TaskData], mode: str, base: ViTParams,
                seed: int) -> tuple[RunRecord, JointModel]:
    """Train once on the union of ``tasks``; only the last row of R is filled."""
    x = np.concatenate([t.train_x for t in tasks])
    y = np.concatenate([t.train_y for t in tasks])
    num_classes = cfg.vit_config().num_classes
    model = joint_model(mode, cfg, base, seed, num_classes)
    started = time.perf_counter()

    def loss_fn(idx):
        logits = model.logits(x[idx])
        loss = T.cross_entropy_masked(logits, y[idx])
        return loss, float((logits.data.argmax(axis=1) == y[idx]).mean())

    log = fit(model.trainable(), loss_fn, len(y), cfg.joint_train, seed, "joint", mode)
    R = AccuracyMatrix.empty([t.n_test for t in tasks])
    record = RunRecord(f"joint_{mode}", "base", seed, cfg.digest(), R, 0,
                       wall_clock=[time.perf_counter() - started])
    record.loss_curve = [(s.step, "train", s.loss, s.accuracy) for s in log]
    last = len(tasks) - 1
    for j, task in enumerate(tasks):
        preds = model.logits(task.test_x).data.argmax(axis=1)
        R.record(last, j, int((preds == task.test_y).sum()))
    train_loss, train_acc = dataset_loss(model, x, y)
    test_x = np.concatenate([t.test_x for t in tasks])
    test_y = np.concatenate([t.test_y for t in tasks])
    test_loss, test_acc = dataset_loss(model, test_x, test_y)
    step = len(log)
    record.loss_curve.append((step, "train_final", train_loss, train_acc))
    record.loss_curve.append((step, "test", test_loss, test_acc))
    record.extras.update(final_train_loss=train_loss, test_accuracy=test_acc)
    vcfg = cfg.vit_config()
    if mode == "full":
        record.trainable_params = count_trainable_params("full", vcfg, num_classes=num_classes)
    else:
        record.trainable_params = count_trainable_params(
            mode, vcfg, prompt_length=cfg.peft.prompt_length, rank=cfg.peft.rank,
            targets=cfg.peft.targets, num_classes=num_classes)
    return record, model


# ------------------------------------------------------------- checkpoints

def save_state(path, state) -> None:
    """Persist a registry, pool, fine-tuned model or joint model."""
    tensors: dict[str, Tensor | np.ndarray] = {}
    if isinstance(state, ExpertRegistry):
        meta = {"state": "sx", "kind": state.kind, "num_classes": state.num_classes,
                "seed": state.seed, "k": state.k, "plus_plus": state.plus_plus,
                "shared_head": state.shared_head, "prompt_length": state.prompt_length,
                "rank": state.rank, "targets": list(state.targets), "lora_alpha": state.lora_alpha,
                "class_map": [list(c) for c in state.class_map],
                "extractor_expert": 0 if state.extractor is not None else None,
                "num_experts": len(state.experts)}
        for t, expert in enumerate(state.experts):
            tensors.update(payload_to_named(expert.payload, f"experts.{t}."))
            if expert.head is not None:
                tensors[f"experts.{t}.head.w"] = expert.head.w
                tensors[f"experts.{t}.head.b"] = expert.head.b
            tensors[f"prototypes.{t}"] = state.prototypes[t]
        if state.head is not None:
            tensors["head.w"], tensors["head.b"] = state.head.w, state.head.b
    elif isinstance(state, AdapterPool):
        meta = {"state": "l2x", "kind": state.kind, "select_count": state.select_count,
                "lam": state.lam, "surrogate": state.surrogate, "seen_classes": state.seen_classes,
                "pool_size": state.pool_size, "payload": payload_meta(state.modules[0].payload)}
        for i, m in enumerate(state.modules):
            tensors.update(payload_to_named(m.payload, f"modules.{i}."))
            tensors[f"keys.{i}"] = state.keys[i]
        tensors["head.w"], tensors["head.b"] = state.head.w, state.head.b
    elif isinstance(state, FinetuneState):
        meta = {"state": "finetune", "seen_classes": state.seen_classes,
                "num_layers": state.cfg.num_layers}
        tensors.update(state.model.named_tensors())
    elif isinstance(state, JointModel):
        meta = {"state": "joint", "mode": state.mode, "num_layers": state.cfg.num_layers}
        if state.mode == "full":
            tensors.update(state.base.named_tensors(include_head=False))
        else:
            tensors.update(payload_to_named(state.payload, "payload."))
            meta["payload"] = payload_meta(state.payload)
        tensors["head.w"], tensors["head.b"] = state.head.w, state.head.b
    else:
        raise RunError(f"cannot checkpoint {type(state).__name__}")
    save_checkpoint(path, tensors, meta)


def load_state(path, base: ViTParams, vcfg: ViTConfig):
    named, meta = load_checkpoint(path)

    def frozen(name):
        return Tensor(named[name])

    kind = meta["state"]
    if kind == "sx":
        reg = ExpertRegistry(base, vcfg, meta["kind"], int(meta["num_classes"]), seed=int(meta["seed"]),
                             k=meta["k"], plus_plus=meta["plus_plus"], shared_head=False,
                             prompt_length=int(meta["prompt_length"]), rank=int(meta["rank"]),
                             targets=tuple(meta["targets"]), lora_alpha=meta["lora_alpha"])
        reg.shared_head = bool(meta["shared_head"])
        pmeta = {"kind": meta["kind"], "rank": meta["rank"], "alpha": meta["lora_alpha"]}
        for t in range(int(meta["num_experts"])):
            payload = payload_from_named(named, pmeta, f"experts.{t}.", requires_grad=False)
            head = None
            if f"experts.{t}.head.w" in named:
                head = Head(frozen(f"experts.{t}.head.w"), frozen(f"experts.{t}.head.b"))
            reg.experts.append(AdapterSet(meta["kind"], payload, head))
            reg.prototypes.append(named[f"prototypes.{t}"])
        reg.class_map = [tuple(c) for c in meta["class_map"]]
        if "head.w" in named:
            reg.head = Head(frozen("head.w"), frozen("head.b"))
        if meta["extractor_expert"] is not None:
            reg.extractor = reg.experts[int(meta["extractor_expert"])].payload
        return reg
    if kind == "l2x":
        modules = [AdapterSet(meta["kind"], payload_from_named(named, meta["payload"], f"modules.{i}."))
                   for i in range(int(meta["pool_size"]))]
        keys = [Tensor(named[f"keys.{i}"], requires_grad=True) for i in range(int(meta["pool_size"]))]
        head = Head(Tensor(named["head.w"], requires_grad=True), Tensor(named["head.b"], requires_grad=True))
        return AdapterPool(base, vcfg, meta["kind"], modules, keys, head, int(meta["select_count"]),
                           float(meta["lam"]), meta["surrogate"], list(meta["seen_classes"]))
    if kind == "finetune":
        model = params_from_named({k: Tensor(v) for k, v in named.items()}, int(meta["num_layers"]))
        return FinetuneState(model, vcfg, list(meta["seen_classes"]))
    if kind == "joint":
        head = Head(frozen("head.w"), frozen("head.b"))
        if meta["mode"] == "full":
            model = params_from_named({k: Tensor(v) for k, v in named.items() if not k.startswith("head.")},
                                      int(meta["num_layers"]))
            return JointModel("full", model, vcfg, head)
        payload = payload_from_named(named, meta["payload"], "payload.", requires_grad=False)
        return JointModel(meta["mode"], base, vcfg, head, payload)
    raise RunError(f"{path}: unknown state {kind!r}")


def write_run(out_dir, record: RunRecord, state=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(record.metric_rows()))
    (out / "loss_curve.csv").write_text(loss_csv(record.loss_curve))
    (out / "accuracy_matrix.csv").write_text(accuracy_matrix_csv(record.accuracy))
    if state is not None:
        save_state(out / "checkpoint", state)
    return out


def accuracy_matrix_csv(R: AccuracyMatrix) -> str:
    lines = ["i,j,correct,test_size,accuracy"]
    for i in range(R.num_tasks):
        for j in range(i + 1):
            if R.correct[i, j] >= 0:
                lines.append(f"{i},{j},{R.correct[i, j]},{R.test_sizes[j]},{format_value(R.R[i, j])}")
    return "\n".join(lines) + "\n"


def prepare(cfg: ExperimentConfig, seed: int) -> list[TaskData]:
    return make_stream(cfg.stream_spec(), seed)
