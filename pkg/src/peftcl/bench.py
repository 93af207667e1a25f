"""Inference throughput in images per second.

``best``: every batch comes from one task whose id is known, so S-X runs a
single expert (LoRA merged into the weights ahead of time). ``average``:
batches mix tasks, so experts are selected per sample and S-LoRA uses the
masked multi-adapter forward. L2X always selects per input and reports a
single regime, written as ``n/a``.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import TaskData
from .l2x import AdapterPool, l2x_predict
from .peft import LoraParams, merge_lora
from .rng import make_rng
from .sx import ExpertRegistry, sx_predict, sx_predict_masked
from .vit import ConfigError, ViTParams, classify, patchify_embed, vit_forward

REGIMES = ("best", "average")
TARGET_FIELDS = {"q": "w_q", "k": "w_k", "v": "w_v", "o": "w_o"}


@dataclass
class BenchResult:
    method: str
    regime: str  # best | average | n/a
    images_per_sec: float
    trials: list[float]
    batch_size: int

    @property
    def metric(self) -> str:
        return "throughput_best" if self.regime == "best" else "throughput_avg"


def time_trials(fn: Callable[[], object], images: int, trials: int = 5, warmup: int = 3) -> list[float]:
    """Images/sec of ``trials`` timed calls after ``warmup`` untimed ones."""
    if trials < 1:
        raise ValueError("need at least one trial")
    for _ in range(warmup):
        fn()
    rates = []
    for _ in range(trials):
        start = time.perf_counter()
        fn()
        rates.append(images / (time.perf_counter() - start))
    return rates


def merged_model(base: ViTParams, lora: LoraParams) -> ViTParams:
    """Copy of ``base`` with every LoRA pair folded into its weight matrix."""
    merged = base.copy()
    for (layer, target), (a, b) in lora.pairs.items():
        blk = merged.blocks[layer]
        field_name = TARGET_FIELDS[target]
        setattr(blk, field_name, merge_lora(getattr(blk, field_name), a, b, lora.scale))
    return merged


def _task_batches(tasks: list[TaskData], batch_size: int, count: int, mixed: bool, seed: int):
    rng = make_rng(seed, "bench", "mixed" if mixed else "single")
    batches = []
    if mixed:
        x = np.concatenate([t.test_x for t in tasks])
        for _ in range(count):
            batches.append((rng.choice(len(x), batch_size, replace=len(x) < batch_size), None))
        return x, batches
    offsets = np.cumsum([0] + [t.n_test for t in tasks])
    x = np.concatenate([t.test_x for t in tasks])
    for i in range(count):
        t = i % len(tasks)
        rows = offsets[t] + rng.choice(tasks[t].n_test, batch_size, replace=tasks[t].n_test < batch_size)
        batches.append((rows, t))
    return x, batches


def sx_runner(registry: ExpertRegistry, tasks: list[TaskData], regime: str, batch_size: int,
              batches: int, seed: int) -> Callable[[], None]:
    x, plan = _task_batches(tasks, batch_size, batches, regime == "average", seed)
    if regime == "best":
        if registry.kind == "lora":
            models = [merged_model(registry.base, e.payload) for e in registry.experts]

            def run():
                for rows, t in plan:
                    feats = vit_forward(patchify_embed(x[rows], registry.cfg, models[t]), models[t],
                                        registry.cfg)
                    head = registry.head if registry.shared_head else registry.experts[t].head
                    classify(feats, head).data.argmax(axis=1)
            return run

        def run():
            for rows, t in plan:
                sx_predict(x[rows], registry, np.full(len(rows), t))
        return run

    if registry.kind == "lora":
        def run():
            for rows, _ in plan:
                sx_predict_masked(x[rows], registry)
        return run

    def run():
        for rows, _ in plan:
            sx_predict(x[rows], registry)
    return run


def l2x_runner(pool: AdapterPool, tasks: list[TaskData], batch_size: int, batches: int,
               seed: int) -> Callable[[], None]:
    x, plan = _task_batches(tasks, batch_size, batches, True, seed)

    def run():
        for rows, _ in plan:
            l2x_predict(x[rows], pool)
    return run


def throughput_bench(method: str, state, tasks: list[TaskData], regime: str = "best",
                     batch_size: int = 32, batches: int = 4, trials: int = 5, warmup: int = 3,
                     seed: int = 0) -> BenchResult:
    """Median images/sec over ``trials`` after ``warmup`` untimed passes."""
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    if isinstance(state, ExpertRegistry):
        fn = sx_runner(state, tasks, regime, batch_size, batches, seed)
    elif isinstance(state, AdapterPool):
        fn = l2x_runner(state, tasks, batch_size, batches, seed)
        regime = "n/a"
    else:
        raise ConfigError(f"{method}: throughput is defined for S-X and L2X states only")
    rates = time_trials(fn, batch_size * batches, trials, warmup)
    return BenchResult(method, regime, statistics.median(rates), rates, batch_size)


def bench_rows(result: BenchResult, seed: int, task_index: int) -> list[tuple]:
    """Rows in the metrics CSV schema; the variant column carries the regime."""
    return [(result.method, result.regime, seed, task_index, result.metric, result.images_per_sec)]
