"""L2X: a shared pool of PEFT modules retrieved per input by key matching.

Each module has a key in the frozen model's feature space. An input's
frozen feature scores every key by cosine similarity and the top
``select_count`` modules are applied: prompts are concatenated in descending
score order in front of the input (L2P), LoRA increments are summed at each
target matrix (L2L). One classifier head is shared across all tasks.

The training objective is cross-entropy plus ``lam`` times a key-matching
term. By default that term is ``sum(1 - cos(query, key))`` over the selected
keys, which pulls them toward their queries; ``surrogate="raw_gamma"`` uses
``+sum(cos)`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TaskData
from .peft import AdapterSet, LoraMixture, batched_features, init_lora, init_prompt
from .rng import make_rng
from .tensor import NumericError, Tensor
from .train import StepLog, TrainConfig, fit
from .vit import ConfigError, Head, ViTConfig, ViTParams, classify, init_head, patchify_embed, vit_forward

SURROGATES = ("one_minus_cos", "raw_gamma")


@dataclass
class AdapterPool:
    base: ViTParams
    cfg: ViTConfig
    kind: str
    modules: list[AdapterSet]
    keys: list[Tensor]
    head: Head
    select_count: int = 5
    lam: float = 0.1
    surrogate: str = "one_minus_cos"
    seen_classes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.keys) != len(self.modules):
            raise ConfigError("one key per pool module")
        if not 1 <= self.select_count <= len(self.modules):
            raise ConfigError(f"select_count {self.select_count} must be in [1, {len(self.modules)}]")
        if self.surrogate not in SURROGATES:
            raise ConfigError(f"unknown surrogate {self.surrogate!r}")

    @property
    def pool_size(self) -> int:
        return len(self.modules)

    def key_matrix(self) -> np.ndarray:
        return np.stack([k.data for k in self.keys])

    def trainable(self) -> list[Tensor]:
        out = []
        for m in self.modules:
            out.extend(m.tensors())
        return out + list(self.keys) + self.head.tensors()


@dataclass
class SelectionResult:
    indices: np.ndarray  # [N] or [B, N], descending score
    scores: np.ndarray
    query: np.ndarray


def init_pool(pool_size: int, kind: str, cfg: ViTConfig, base: ViTParams, seed: int,
              num_classes: int | None = None, select_count: int = 5, lam: float = 0.1,
              prompt_length: int = 10, rank: int = 1, targets=("q", "v"),
              lora_alpha: float | None = None, surrogate: str = "one_minus_cos") -> AdapterPool:
    """Fresh pool: modules from the PEFT initializers, unit-norm Gaussian keys."""
    if pool_size < 1:
        raise ConfigError("pool size must be ≥ 1")
    D = cfg.hidden_dim
    modules = []
    for i in range(pool_size):
        if kind == "prompt":
            payload = init_prompt(prompt_length, D, seed, "pool", i)
        elif kind == "lora":
            payload = init_lora(rank, targets, D, cfg.num_layers, seed, "pool", i, alpha=lora_alpha)
        else:
            raise ConfigError(f"unknown PEFT kind {kind!r}")
        modules.append(AdapterSet(kind, payload))
    rng = make_rng(seed, "pool_keys")
    raw = rng.standard_normal((pool_size, D))
    keys = [Tensor(r / np.linalg.norm(r), requires_grad=True) for r in raw]
    head = init_head(D, cfg.num_classes if num_classes is None else num_classes, seed, "pool")
    return AdapterPool(base, cfg, kind, modules, keys, head, select_count, lam, surrogate)


def score_keys(query, keys) -> np.ndarray:
    """Cosine similarity of each query row against each key: [M] or [B, M]."""
    q = np.asarray(query, dtype=np.float64)
    k = np.stack([kk.data for kk in keys]) if isinstance(keys, (list, tuple)) else np.asarray(keys)
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    if (qn == 0).any():
        raise NumericError("zero-norm query")
    kn = np.linalg.norm(k, axis=-1)
    if (kn == 0).any():
        raise NumericError("zero-norm key")
    return (q / qn) @ (k / kn[:, None]).T


def select_topN(scores, n: int) -> SelectionResult:
    """Indices of the ``n`` highest scores, descending; ties → lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    m = scores.shape[-1]
    if not 0 <= n <= m:
        raise ConfigError(f"cannot select {n} of {m}")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :n]
    return SelectionResult(order, np.take_along_axis(scores, order, axis=-1), np.empty(0))


def query_features(images, pool: AdapterPool) -> np.ndarray:
    """Frozen, unadapted features; never part of a gradient path."""
    return batched_features(images, pool.base, pool.cfg)


def select(images, pool: AdapterPool, query: np.ndarray | None = None) -> SelectionResult:
    q = query_features(images, pool) if query is None else query
    res = select_topN(score_keys(q, pool.keys), pool.select_count)
    res.query = q
    return res


def l2x_features(images, pool: AdapterPool, indices: np.ndarray) -> Tensor:
    """Features of ``images`` with each row's selected modules applied."""
    indices = np.atleast_2d(np.asarray(indices, dtype=np.int64))
    used = np.unique(indices)
    pos = np.searchsorted(used, indices)
    x = patchify_embed(images, pool.cfg, pool.base)
    b, n = indices.shape
    if pool.kind == "prompt":
        stacked = T.stack([pool.modules[u].payload.P for u in used], axis=0)  # U x L_P x D
        lp, d = stacked.shape[1], stacked.shape[2]
        tokens = T.reshape(stacked[pos], (b, n * lp, d))
        return vit_forward(T.concat([tokens, x], axis=1), pool.base, pool.cfg, cls_index=n * lp)
    weights = np.zeros((b, len(used)))
    np.put_along_axis(weights, pos, 1.0, axis=1)
    mix = LoraMixture([pool.modules[u].payload for u in used], weights)
    return vit_forward(x, pool.base, pool.cfg, lora=mix)


def l2x_forward(images, pool: AdapterPool, selection: SelectionResult | np.ndarray) -> Tensor:
    indices = selection.indices if isinstance(selection, SelectionResult) else selection
    return classify(l2x_features(images, pool, indices), pool.head)


def surrogate_term(query: np.ndarray, pool: AdapterPool, indices: np.ndarray) -> Tensor:
    """Batch mean of the key-matching term over each row's selected keys."""
    indices = np.atleast_2d(indices)
    query = np.atleast_2d(query)
    used = np.unique(indices)
    pos = np.searchsorted(used, indices)
    keys = T.stack([pool.keys[u] for u in used], axis=0)[pos]  # B x N x D
    q = Tensor._wrap(query[:, None, :])
    cos = T.cosine_similarity(keys, q, axis=-1)  # B x N
    per_row = T.tsum(cos, axis=1)
    if pool.surrogate == "one_minus_cos":
        per_row = indices.shape[1] - per_row
    return T.mean(per_row)


def l2x_loss(images, labels, pool: AdapterPool, class_mask=None,
             query: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Masked cross-entropy plus ``lam`` times the key-matching term."""
    sel = select(images, pool, query)
    logits = l2x_forward(images, pool, sel)
    loss = T.cross_entropy_masked(logits, labels, class_mask)
    if pool.lam:
        loss = loss + surrogate_term(sel.query, pool, sel.indices) * pool.lam
    return loss, logits.data


def l2x_train_task(task: TaskData, pool: AdapterPool, train_cfg: TrainConfig, seed: int,
                   scenario: str = "CIL") -> list[StepLog]:
    """Train modules, keys and head on one task; selection is redone per minibatch."""
    mask = None
    if scenario == "CIL":
        mask = np.zeros(pool.head.w.shape[1], dtype=bool)
        mask[list(task.classes)] = True
    query = query_features(task.train_x, pool)
    params = pool.trainable()

    def loss_fn(idx):
        loss, logits = l2x_loss(task.train_x[idx], task.train_y[idx], pool, mask, query[idx])
        z = logits if mask is None else np.where(mask, logits, -np.inf)
        return loss, float((z.argmax(axis=1) == task.train_y[idx]).mean())

    log = fit(params, loss_fn, task.n_train, train_cfg, seed, "l2x", task.task_id)
    pool.seen_classes = sorted(set(pool.seen_classes) | set(task.classes))
    return log


def l2x_predict(images, pool: AdapterPool, chunk: int = 256) -> np.ndarray:
    """Per-input selection, forward, argmax over every class seen so far."""
    images = np.asarray(images)
    seen = np.array(pool.seen_classes if pool.seen_classes else range(pool.head.w.shape[1]))
    out = []
    for i in range(0, len(images), chunk):
        part = images[i:i + chunk]
        logits = l2x_forward(part, pool, select(part, pool)).data
        out.append(seen[logits[:, seen].argmax(axis=1)])
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
