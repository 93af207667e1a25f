"""S-X: one parameter-efficient expert per dataset, picked by nearest prototype.

Each finished dataset leaves behind an adapter (prompt or LoRA), an output
head (unless the shared-head variant is on) and ``k`` k-means centroids of
its training features. At inference the globally nearest centroid names the
expert. The ``plus_plus`` variant swaps the feature extractor for the model
adapted on the first dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TaskData
from .peft import (AdapterSet, LoraMixture, LoraParams, PromptParams, adapted_features,
                   batched_features, init_lora, init_prompt)
from .rng import make_rng
from .train import StepLog, TrainConfig, fit
from .vit import ConfigError, Head, ViTConfig, ViTParams, classify, init_head


# ------------------------------------------------------------------- k-means

@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(points, points[idx:idx + 1])[:, 0])
    return points[chosen].copy()


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int) -> KMeansResult:
    k = len(centroids)
    d2 = _sq_dists(points, centroids)
    assign = d2.argmin(axis=1)
    for _ in range(max_iters):
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        # empty clusters take the point farthest from its own centroid
        own = _sq_dists(points, new)[np.arange(len(points)), assign]
        for j in range(k):
            if not (assign == j).any():
                far = int(own.argmax())
                new[j] = points[far]
                assign[far] = j
                own[far] = 0.0
        centroids = new
        d2 = _sq_dists(points, centroids)
        new_assign = d2.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), assign].sum())
    return KMeansResult(centroids, assign, inertia)


def _cluster_means(points: np.ndarray, assign: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    means = fallback.copy()
    for j in range(len(fallback)):
        members = assign == j
        if members.any():
            means[j] = points[members].mean(axis=0)
    return means


def _hartigan(points: np.ndarray, res: KMeansResult, max_iters: int) -> KMeansResult:
    """Move single points between clusters while that lowers the inertia.

    Moving ``x`` from cluster ``a`` to ``b`` changes the inertia by
    ``n_b/(n_b+1)·|x-m_b|² - n_a/(n_a-1)·|x-m_a|²``; the best strictly
    negative move is applied, lowest point index first.
    """
    k = len(res.centroids)
    assign = res.assignment.copy()
    sizes = np.bincount(assign, minlength=k).astype(np.float64)
    means = _cluster_means(points, assign, res.centroids)
    for _ in range(max_iters * len(points)):
        moved = False
        for i, x in enumerate(points):
            a = assign[i]
            if sizes[a] < 2:
                continue
            d2 = ((means - x) ** 2).sum(axis=1)
            gain = sizes / (sizes + 1.0) * d2 - sizes[a] / (sizes[a] - 1.0) * d2[a]
            gain[a] = 0.0
            b = int(gain.argmin())
            if gain[b] < -1e-12 * max(1.0, d2[a]):
                means[a] = (means[a] * sizes[a] - x) / (sizes[a] - 1.0)
                means[b] = (means[b] * sizes[b] + x) / (sizes[b] + 1.0)
                sizes[a] -= 1.0
                sizes[b] += 1.0
                assign[i] = b
                moved = True
        if not moved:
            break
    # recompute means exactly, then let Lloyd settle the nearest-centroid assignment
    return _lloyd(points, _cluster_means(points, assign, res.centroids), max_iters)


def kmeans(points, k: int, seed: int, max_iters: int = 100, n_init: int = 10,
           stream: tuple = ()) -> KMeansResult:
    """k-means++ seeded Lloyd iterations refined by single-point moves, best of
    ``n_init`` restarts.

    Assignment ties go to the lowest centroid index; restarts with equal
    inertia keep the earliest.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be [n, d]")
    if not 1 <= k <= len(points):
        raise ConfigError(f"k={k} needs 1 ≤ k ≤ {len(points)} points")
    best = None
    for restart in range(n_init):
        rng = make_rng(seed, "kmeans", *stream, restart)
        res = _lloyd(points, _plus_plus_init(points, k, rng), max_iters)
        res = _hartigan(points, res, max_iters)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ------------------------------------------------------------------ registry

@dataclass
class ExpertRegistry:
    base: ViTParams
    cfg: ViTConfig
    kind: str
    num_classes: int
    seed: int = 0
    k: int | None = None
    plus_plus: bool = False
    shared_head: bool = False
    prompt_length: int = 10
    rank: int = 1
    targets: tuple[str, ...] = ("q", "v")
    lora_alpha: float | None = None
    experts: list[AdapterSet] = field(default_factory=list)
    prototypes: list[np.ndarray] = field(default_factory=list)
    class_map: list[tuple[int, ...]] = field(default_factory=list)
    head: Head | None = None
    extractor: PromptParams | LoraParams | None = None

    def __post_init__(self):
        if self.kind not in ("prompt", "lora"):
            raise ConfigError(f"unknown PEFT kind {self.kind!r}")
        if self.shared_head and self.head is None:
            self.head = init_head(self.cfg.hidden_dim, self.num_classes, self.seed, "sx_shared")

    @property
    def seen_classes(self) -> list[int]:
        return sorted({c for cls in self.class_map for c in cls})


def extract_features(images, registry: ExpertRegistry) -> np.ndarray:
    """Embed with the registry's extractor (frozen base, or the first adapted model for ++)."""
    return batched_features(images, registry.base, registry.cfg, registry.extractor)


def default_k(scenario: str, new_classes: int) -> int:
    return 2 * new_classes if scenario == "CIL" else 5


def _new_payload(registry: ExpertRegistry, seed: int, t: int):
    cfg = registry.cfg
    if registry.kind == "prompt":
        return init_prompt(registry.prompt_length, cfg.hidden_dim, seed, "sx", t)
    return init_lora(registry.rank, registry.targets, cfg.hidden_dim, cfg.num_layers, seed, "sx", t,
                     alpha=registry.lora_alpha)


def sx_train_task(task: TaskData, registry: ExpertRegistry, train_cfg: TrainConfig, seed: int,
                  scenario: str = "CIL") -> list[StepLog]:
    """Allocate, train and register the expert for ``task``; returns the step log."""
    t = len(registry.experts)
    classes = tuple(task.classes)
    payload = _new_payload(registry, seed, t)
    if registry.shared_head:
        head = registry.head
        labels = task.train_y
        mask = np.zeros(registry.num_classes, dtype=bool)
        mask[list(classes)] = True
        if scenario == "DIL":
            mask[:] = True
    else:
        head = init_head(registry.cfg.hidden_dim, len(classes), seed, "sx", t)
        lookup = {c: i for i, c in enumerate(classes)}
        labels = np.array([lookup[int(y)] for y in task.train_y], dtype=np.int64)
        mask = None
    params = list(payload.tensors()) + head.tensors()

    def loss_fn(idx):
        feats = adapted_features(task.train_x[idx], registry.base, registry.cfg, payload)
        logits = classify(feats, head)
        loss = T.cross_entropy_masked(logits, labels[idx], mask)
        z = logits.data if mask is None else np.where(mask, logits.data, -np.inf)
        return loss, float((z.argmax(axis=1) == labels[idx]).mean())

    log = fit(params, loss_fn, task.n_train, train_cfg, seed, "sx", t)
    for p in payload.tensors():
        p.requires_grad = False
    if not registry.shared_head:
        for p in head.tensors():
            p.requires_grad = False

    if registry.plus_plus and t == 0:
        registry.extractor = payload
    k = registry.k if registry.k is not None else default_k(scenario, len(classes))
    feats = extract_features(task.train_x, registry)
    km = kmeans(feats, min(k, len(feats)), seed, stream=("sx", t))
    registry.prototypes.append(km.centroids)
    registry.experts.append(AdapterSet(registry.kind, payload, None if registry.shared_head else head))
    registry.class_map.append(classes)
    return log


def select_expert(images, registry: ExpertRegistry, features: np.ndarray | None = None) -> np.ndarray:
    """Owning dataset of the nearest prototype for each image (ties → earliest)."""
    if not registry.experts:
        raise ConfigError("registry has no experts")
    feats = extract_features(images, registry) if features is None else features
    protos = np.concatenate(registry.prototypes, axis=0)
    owners = np.concatenate([np.full(len(p), t) for t, p in enumerate(registry.prototypes)])
    return owners[_sq_dists(feats, protos).argmin(axis=1)]


def expert_logits(images, registry: ExpertRegistry, expert: int) -> np.ndarray:
    adapter = registry.experts[expert]
    feats = adapted_features(images, registry.base, registry.cfg, adapter.payload)
    head = registry.head if registry.shared_head else adapter.head
    return classify(feats, head).data


def sx_predict(images, registry: ExpertRegistry, experts: np.ndarray | None = None,
               chunk: int = 256) -> np.ndarray:
    """Labels for a batch; ``experts`` forces the routing (e.g. the true task ids)."""
    images = np.asarray(images)
    if experts is None:
        experts = select_expert(images, registry)
    experts = np.asarray(experts)
    out = np.empty(len(images), dtype=np.int64)
    seen = np.array(registry.seen_classes)
    for e in np.unique(experts):
        rows = np.flatnonzero(experts == e)
        for i in range(0, len(rows), chunk):
            part = rows[i:i + chunk]
            logits = expert_logits(images[part], registry, int(e))
            if registry.shared_head:
                out[part] = seen[logits[:, seen].argmax(axis=1)]
            else:
                out[part] = np.asarray(registry.class_map[int(e)])[logits.argmax(axis=1)]
    return out


def sx_predict_masked(images, registry: ExpertRegistry, experts: np.ndarray | None = None) -> np.ndarray:
    """Same predictions as :func:`sx_predict` for LoRA experts, in one masked batch.

    Every expert's increment is computed for every sample and masked to the
    routed expert; per-expert heads are then applied row-wise.
    """
    if registry.kind != "lora":
        raise ConfigError("masked routing needs LoRA experts")
    images = np.asarray(images)
    if experts is None:
        experts = select_expert(images, registry)
    experts = np.asarray(experts)
    weights = np.zeros((len(images), len(registry.experts)))
    weights[np.arange(len(images)), experts] = 1.0
    mix = LoraMixture([e.payload for e in registry.experts], weights)
    feats = adapted_features(images, registry.base, registry.cfg, lora=mix).data
    if registry.shared_head:
        seen = np.array(registry.seen_classes)
        logits = feats @ registry.head.w.data + registry.head.b.data
        return seen[logits[:, seen].argmax(axis=1)]
    out = np.empty(len(images), dtype=np.int64)
    for e in np.unique(experts):
        rows = experts == e
        head = registry.experts[int(e)].head
        logits = feats[rows] @ head.w.data + head.b.data
        out[rows] = np.asarray(registry.class_map[int(e)])[logits.argmax(axis=1)]
    return out


def expert_selection_accuracy(registry: ExpertRegistry, images, task_ids) -> float:
    task_ids = np.asarray(task_ids)
    if len(task_ids) == 0:
        raise ValueError("empty test stream")
    return float((select_expert(images, registry) == task_ids).mean())
