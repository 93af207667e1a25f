"""Synthetic continual-learning streams and the on-disk dataset format.

Images are sums of a few class-specific colored sinusoidal gratings with
random circular shifts, amplitude jitter and pixel noise. Class-incremental
streams split a class range into disjoint groups; domain-incremental streams
apply one deterministic input transform per domain to a fixed label set.

Dataset directories hold a text ``manifest``::

    count: 40
    height: 16
    width: 16
    channels: 3
    dtype: f32le
    labels: 0 1 1 0 ...
    domain: 0

and ``images.f32``, the little-endian float32 pixels, row-major
[count, height, width, channels].
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng

PRETEXT_CLASS_OFFSET = 1000


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class TaskDescriptor:
    classes: tuple[int, ...] = ()
    domain: int = 0
    path: str | None = None


@dataclass(frozen=True)
class StreamSpec:
    scenario: str = "CIL"  # "CIL" | "DIL"
    tasks: tuple[TaskDescriptor, ...] = ()
    image_height: int = 16
    image_width: int = 16
    channels: int = 3
    train_per_class: int = 40
    test_per_class: int = 20
    noise: float = 0.3
    max_shift: int = 2
    freq_low: float = 1.0
    freq_high: float = 4.0
    components: int = 3
    pretext_classes: int = 10
    pretext_train_per_class: int = 60
    pretext_freq_low: float = 1.0
    pretext_freq_high: float = 4.0

    @property
    def num_classes(self) -> int:
        labels = set()
        for t in self.tasks:
            labels.update(t.classes)
        return max(labels) + 1 if labels else 0

    def validate(self) -> None:
        if self.scenario not in ("CIL", "DIL"):
            raise StreamError(f"unknown scenario {self.scenario!r}")
        if not self.tasks:
            raise StreamError("stream has no tasks")
        if any(t.path is not None for t in self.tasks):
            return  # label sets are checked after loading
        sets = [set(t.classes) for t in self.tasks]
        if any(not s for s in sets):
            raise StreamError("every task needs a non-empty class set")
        if self.scenario == "CIL":
            seen: set[int] = set()
            for i, s in enumerate(sets):
                if seen & s:
                    raise StreamError(f"CIL task {i} reuses classes {sorted(seen & s)}")
                seen |= s
        elif any(s != sets[0] for s in sets):
            raise StreamError("DIL tasks must share one label set")


def cil_spec(num_classes: int = 10, num_tasks: int = 5, **kw) -> StreamSpec:
    if num_classes % num_tasks:
        raise StreamError("num_classes must divide evenly into num_tasks")
    per = num_classes // num_tasks
    tasks = tuple(TaskDescriptor(tuple(range(i * per, (i + 1) * per)), 0) for i in range(num_tasks))
    return StreamSpec(scenario="CIL", tasks=tasks, **kw)


def dil_spec(num_classes: int = 5, num_domains: int = 4, **kw) -> StreamSpec:
    classes = tuple(range(num_classes))
    tasks = tuple(TaskDescriptor(classes, d) for d in range(num_domains))
    return StreamSpec(scenario="DIL", tasks=tasks, **kw)


@dataclass
class TaskData:
    task_id: int
    classes: tuple[int, ...]
    domain: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    @property
    def n_test(self) -> int:
        return len(self.test_y)


# ---------------------------------------------------------------- generator

def class_pattern(spec: StreamSpec, seed: int, label: int, low: float, high: float) -> np.ndarray:
    rng = make_rng(seed, "pattern", label)
    h, w, c = spec.image_height, spec.image_width, spec.channels
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    img = np.zeros((h, w, c))
    for _ in range(spec.components):
        radius = rng.uniform(low, high)
        angle = rng.uniform(0.0, np.pi)
        fx, fy = radius * np.cos(angle), radius * np.sin(angle)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        color = rng.normal(size=c)
        wave = np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
        img += wave[:, :, None] * color[None, None, :]
    return img / (img.std() + 1e-12)


def domain_transform(images: np.ndarray, domain: int, seed: int) -> np.ndarray:
    """Deterministic per-domain input shift; domain 0 is the identity."""
    if domain == 0:
        return images
    kind = (domain - 1) % 3
    strength = 1 + (domain - 1) // 3
    if kind == 0:
        out = np.roll(images, strength, axis=-1)
        out[..., 0] = -out[..., 0]
        return out
    if kind == 1:
        return np.rot90(images, k=strength, axes=(1, 2)).copy()
    rng = make_rng(seed, "domain_texture", domain)
    texture = rng.normal(size=images.shape[1:]) * 0.5
    return 0.6 * images + 0.4 + texture[None]


def _sample(spec: StreamSpec, seed: int, labels: np.ndarray, patterns: dict[int, np.ndarray],
            *stream: object) -> np.ndarray:
    rng = make_rng(seed, "samples", *stream)
    n = len(labels)
    out = np.empty((n, spec.image_height, spec.image_width, spec.channels))
    s = spec.max_shift
    for i, y in enumerate(labels):
        dy, dx = rng.integers(-s, s + 1, size=2) if s else (0, 0)
        amp = rng.uniform(0.8, 1.2)
        img = np.roll(patterns[int(y)], (int(dy), int(dx)), axis=(0, 1)) * amp
        out[i] = img + rng.normal(0.0, spec.noise, size=img.shape)
    return out


def _balanced_labels(classes, per_class: int, seed: int, *stream: object) -> np.ndarray:
    labels = np.repeat(np.asarray(classes, dtype=np.int64), per_class)
    return labels[make_rng(seed, "order", *stream).permutation(len(labels))]


def _f32(x: np.ndarray) -> np.ndarray:
    # data passes through float32 so on-disk round trips are exact
    return x.astype(np.float32).astype(np.float64)


def make_stream(spec: StreamSpec, seed: int) -> list[TaskData]:
    """Materialize every task of ``spec``; identical seeds give identical pixels."""
    spec.validate()
    tasks = []
    for t, desc in enumerate(spec.tasks):
        if desc.path is not None:
            tasks.append(load_task(desc.path, t))
            continue
        patterns = {c: class_pattern(spec, seed, c, spec.freq_low, spec.freq_high) for c in desc.classes}
        tr_y = _balanced_labels(desc.classes, spec.train_per_class, seed, "train", t)
        te_y = _balanced_labels(desc.classes, spec.test_per_class, seed, "test", t)
        tr_x = _sample(spec, seed, tr_y, patterns, "train", t)
        te_x = _sample(spec, seed, te_y, patterns, "test", t)
        tr_x = domain_transform(tr_x, desc.domain, seed)
        te_x = domain_transform(te_x, desc.domain, seed)
        tasks.append(TaskData(t, tuple(sorted(desc.classes)), desc.domain,
                              _f32(tr_x), tr_y, _f32(te_x), te_y))
    if any(d.path is not None for d in spec.tasks):
        _check_loaded(spec.scenario, tasks)
    return tasks


def _check_loaded(scenario: str, tasks: list[TaskData]) -> None:
    sets = [set(t.classes) for t in tasks]
    if scenario == "CIL":
        for i in range(len(sets)):
            for j in range(i):
                if sets[i] & sets[j]:
                    raise StreamError(f"CIL tasks {j} and {i} overlap")
    elif any(s != sets[0] for s in sets):
        raise StreamError("DIL tasks must share one label set")


def make_pretext(spec: StreamSpec, seed: int) -> TaskData:
    """Backbone-pretraining split: classes disjoint from every stream class."""
    classes = tuple(PRETEXT_CLASS_OFFSET + c for c in range(spec.pretext_classes))
    patterns = {c: class_pattern(spec, seed, c, spec.pretext_freq_low, spec.pretext_freq_high)
                for c in classes}
    tr_y = _balanced_labels(classes, spec.pretext_train_per_class, seed, "pretext_train")
    te_y = _balanced_labels(classes, max(1, spec.pretext_train_per_class // 4), seed, "pretext_test")
    tr_x = _f32(_sample(spec, seed, tr_y, patterns, "pretext_train"))
    te_x = _f32(_sample(spec, seed, te_y, patterns, "pretext_test"))
    # labels re-indexed to 0..pretext_classes-1 for the pretraining head
    return TaskData(-1, tuple(range(spec.pretext_classes)), 0, tr_x, tr_y - PRETEXT_CLASS_OFFSET,
                    te_x, te_y - PRETEXT_CLASS_OFFSET)


# --------------------------------------------------------------- file format

def write_dataset(path: str | os.PathLike, images: np.ndarray, labels, domain: int = 0) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images)
    if images.ndim != 4:
        raise StreamError("images must be [count, height, width, channels]")
    labels = np.asarray(labels, dtype=np.int64)
    n, h, w, c = images.shape
    if labels.shape != (n,):
        raise StreamError(f"{labels.shape} labels for {n} images")
    lines = [f"count: {n}", f"height: {h}", f"width: {w}", f"channels: {c}", "dtype: f32le",
             "labels: " + " ".join(str(int(y)) for y in labels), f"domain: {int(domain)}"]
    (path / "manifest").write_text("\n".join(lines) + "\n")
    (path / "images.f32").write_bytes(np.ascontiguousarray(images, dtype="<f4").tobytes())
    return path


def read_dataset(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, int]:
    path = Path(path)
    fields = {}
    for line in (path / "manifest").read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    try:
        n, h, w, c = (int(fields[k]) for k in ("count", "height", "width", "channels"))
        dtype = fields["dtype"]
        labels = np.array([int(v) for v in fields["labels"].split()], dtype=np.int64)
        domain = int(fields.get("domain", 0))
    except KeyError as err:
        raise StreamError(f"{path}/manifest: missing field {err.args[0]}") from None
    if dtype != "f32le":
        raise StreamError(f"{path}/manifest: unsupported dtype {dtype}")
    if labels.shape != (n,):
        raise StreamError(f"{path}/manifest: {labels.size} labels for count {n}")
    raw = np.frombuffer((path / "images.f32").read_bytes(), dtype="<f4")
    if raw.size != n * h * w * c:
        raise StreamError(f"{path}/images.f32: expected {n * h * w * c} floats, got {raw.size}")
    return raw.reshape(n, h, w, c).astype(np.float64), labels, domain


def write_task(path: str | os.PathLike, task: TaskData) -> Path:
    path = Path(path)
    write_dataset(path / "train", task.train_x, task.train_y, task.domain)
    write_dataset(path / "test", task.test_x, task.test_y, task.domain)
    return path


def load_task(path: str | os.PathLike, task_id: int) -> TaskData:
    tr_x, tr_y, domain = read_dataset(Path(path) / "train")
    te_x, te_y, _ = read_dataset(Path(path) / "test")
    classes = tuple(sorted(set(tr_y.tolist()) | set(te_y.tolist())))
    return TaskData(task_id, classes, domain, tr_x, tr_y, te_x, te_y)
