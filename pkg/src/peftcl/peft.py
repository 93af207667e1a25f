"""Soft prompts and low-rank adapters, plus the masked multi-adapter forward.

Weights follow the row-vector convention ``z @ W`` with ``W`` of shape
``D_in x D_out``; a LoRA pair is ``B: D_in x r`` and ``A: r x D_out`` so the
increment is ``(z @ B) @ A``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .rng import make_rng
from .tensor import Tensor
from .vit import ConfigError, Head

PROMPT_INIT_RANGE = 0.03
LORA_A_STD = 0.02


@dataclass
class PromptParams:
    P: Tensor  # L_P x D

    @property
    def length(self) -> int:
        return self.P.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.P]


@dataclass
class LoraParams:
    """LoRA pairs keyed by ``(layer, target)``; each value is ``(A, B)``."""

    rank: int
    pairs: dict[tuple[int, str], tuple[Tensor, Tensor]]
    alpha: float | None = None

    @property
    def scale(self) -> float:
        return 1.0 if self.alpha is None else self.alpha / self.rank

    def tensors(self) -> list[Tensor]:
        out = []
        for key in sorted(self.pairs):
            out.extend(self.pairs[key])
        return out

    def delta(self, layer: int, target: str, z: Tensor) -> Tensor | None:
        pair = self.pairs.get((layer, target))
        if pair is None:
            return None
        a, b = pair
        inc = T.matmul(T.matmul(z, b), a)
        return inc if self.scale == 1.0 else inc * self.scale


@dataclass
class AdapterSet:
    kind: str  # "prompt" | "lora"
    payload: PromptParams | LoraParams
    head: Head | None = None

    def __post_init__(self):
        expected = PromptParams if self.kind == "prompt" else LoraParams
        if self.kind not in ("prompt", "lora") or not isinstance(self.payload, expected):
            raise ConfigError(f"adapter kind {self.kind!r} does not match payload")

    def tensors(self, include_head: bool = True) -> list[Tensor]:
        out = list(self.payload.tensors())
        if include_head and self.head is not None:
            out.extend(self.head.tensors())
        return out


def init_prompt(length: int, dim: int, seed: int, *stream: object) -> PromptParams:
    """Prompt tokens drawn i.i.d. uniform in ±0.03 from stream ``("prompt", *stream)``."""
    if length < 1:
        raise ConfigError("prompt length must be ≥ 1")
    rng = make_rng(seed, "prompt", *stream)
    data = rng.uniform(-PROMPT_INIT_RANGE, PROMPT_INIT_RANGE, size=(length, dim))
    return PromptParams(Tensor(data, requires_grad=True))


def prepend_prompt(prompts: PromptParams | Sequence[PromptParams], x: Tensor) -> Tensor:
    """Return ``[P_1; ...; P_N; x]`` along the sequence axis.

    ``x`` is [L_S, D] or [B, L_S, D]; prompts broadcast over the batch. An
    empty sequence of prompts returns ``x`` itself.
    """
    if isinstance(prompts, PromptParams):
        prompts = [prompts]
    if not prompts:
        return x
    d = x.shape[-1]
    for p in prompts:
        if p.P.shape[-1] != d:
            raise T.ShapeError(f"prompt dim {p.P.shape[-1]} != input dim {d}")
    tokens = prompts[0].P if len(prompts) == 1 else T.concat([p.P for p in prompts], axis=0)
    if x.ndim == 2:
        return T.concat([tokens, x], axis=0)
    b = x.shape[0]
    tokens = T.add(tokens, Tensor._wrap(np.zeros((b,) + tokens.shape)))
    return T.concat([tokens, x], axis=1)


def init_lora(rank: int, targets: Sequence[str], dim: int, num_layers: int, seed: int,
              *stream: object, alpha: float | None = None) -> LoraParams:
    """A ~ N(0, 0.02²), B = 0 for every (layer, target); initial increment is exactly zero."""
    if rank < 1:
        raise ConfigError("LoRA rank must be ≥ 1")
    rng = make_rng(seed, "lora", *stream)
    pairs = {}
    for layer in range(num_layers):
        for target in targets:
            a = Tensor(rng.normal(0.0, LORA_A_STD, size=(rank, dim)), requires_grad=True)
            b = Tensor(np.zeros((dim, rank)), requires_grad=True)
            pairs[(layer, target)] = (a, b)
    return LoraParams(rank, pairs, alpha)


def lora_param_count(lora: LoraParams) -> int:
    return sum(a.size + b.size for a, b in lora.pairs.values())


def lora_linear_forward(w: Tensor, a: Tensor, b: Tensor, z: Tensor) -> Tensor:
    """``z @ W + (z @ B) @ A`` without forming ``B @ A``."""
    if w.shape != (b.shape[0], a.shape[1]) or a.shape[0] != b.shape[1]:
        raise T.ShapeError(f"W {w.shape}, A {a.shape}, B {b.shape} do not fit together")
    return T.matmul(z, w) + T.matmul(T.matmul(z, b), a)


def merge_lora(w: Tensor, a: Tensor, b: Tensor, scale: float = 1.0) -> Tensor:
    """Return a new (non-trainable) ``W + scale · B @ A``."""
    return Tensor(w.data + scale * (b.data @ a.data))


def _assignment_weights(assignment, batch: int, n: int) -> np.ndarray:
    assignment = np.asarray(assignment)
    if assignment.ndim == 1:
        if assignment.shape[0] != batch:
            raise T.ShapeError(f"{assignment.shape[0]} assignments for batch of {batch}")
        ids = assignment.astype(np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"adapter id out of range [0, {n})")
        weights = np.zeros((batch, n))
        weights[np.arange(batch), ids] = 1.0
        return weights
    if assignment.shape != (batch, n):
        raise T.ShapeError(f"weight matrix {assignment.shape} != ({batch}, {n})")
    return assignment.astype(np.float64)


def multi_lora_masked_forward(w: Tensor, z: Tensor, adapters: Sequence[tuple[Tensor, Tensor]],
                              assignment) -> Tensor:
    """Every adapter's increment for every sample, masked per sample, then summed.

    ``z`` is [B, ..., D_in]. ``assignment`` is either one adapter id per
    sample (0/1 mask) or a [B, n] weight matrix (e.g. an L2X selection mask).
    """
    return T.matmul(z, w) + masked_lora_delta(z, adapters, assignment)


def masked_lora_delta(z: Tensor, adapters: Sequence[tuple[Tensor, Tensor]], assignment,
                      scale: float = 1.0) -> Tensor:
    n, batch = len(adapters), z.shape[0]
    weights = _assignment_weights(assignment, batch, n)
    a_stack = T.stack([a for a, _ in adapters], axis=0)  # n x r x D_out
    b_stack = T.stack([b for _, b in adapters], axis=0)  # n x D_in x r
    lead = z.ndim - 2
    # z: [1, B, ..., D_in] against [n, 1.., D_in, r]; a 2-d z has one row per sample
    zz = T.reshape(z, (1,) + z.shape)
    bb = T.reshape(b_stack, (n,) + (1,) * lead + b_stack.shape[1:])
    aa = T.reshape(a_stack, (n,) + (1,) * lead + a_stack.shape[1:])
    inc = T.matmul(T.matmul(zz, bb), aa)  # n x B x ... x D_out
    mask = weights.T.reshape((n, batch) + (1,) * (z.ndim - 1))
    if scale != 1.0:
        mask = mask * scale
    return T.tsum(inc * Tensor._wrap(mask), axis=0)


@dataclass
class LoraMixture:
    """Per-sample weighted combination of several LoRA sets inside the ViT.

    ``weights`` is [B, n]: 0/1 rows route each sample to one expert, rows
    with several ones add the selected increments.
    """

    adapters: Sequence[LoraParams]
    weights: np.ndarray
    _keys: set = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self._keys = set()
        for lp in self.adapters:
            self._keys.update(lp.pairs)
        scales = {lp.scale for lp in self.adapters}
        if len(scales) > 1:
            raise ConfigError("mixed LoRA scales in one mixture")

    def delta(self, layer: int, target: str, z: Tensor) -> Tensor | None:
        if (layer, target) not in self._keys:
            return None
        scale = self.adapters[0].scale
        pairs, cols = [], []
        for i, lp in enumerate(self.adapters):
            pair = lp.pairs.get((layer, target))
            if pair is not None:
                pairs.append(pair)
                cols.append(i)
        return masked_lora_delta(z, pairs, self.weights[:, cols], scale)


def adapted_features(images, base, cfg, payload: PromptParams | LoraParams | None = None,
                     lora=None) -> Tensor:
    """Frozen-base features of a batch with one adapter payload applied."""
    from .vit import patchify_embed, vit_forward

    x = patchify_embed(images, cfg, base)
    cls_index = 0
    if isinstance(payload, PromptParams):
        x = prepend_prompt(payload, x)
        cls_index = payload.length
    elif isinstance(payload, LoraParams):
        lora = payload
    return vit_forward(x, base, cfg, lora=lora, cls_index=cls_index)


def batched_features(images, base, cfg, payload=None, chunk: int = 256) -> np.ndarray:
    """Inference-only features for many images, chunked to bound memory."""
    images = np.asarray(images)
    out = [adapted_features(images[i:i + chunk], base, cfg, payload).data
           for i in range(0, len(images), chunk)]
    if not out:
        return np.zeros((0, cfg.hidden_dim))
    return np.concatenate(out, axis=0)


def payload_to_named(payload: PromptParams | LoraParams, prefix: str = "") -> dict[str, Tensor]:
    if isinstance(payload, PromptParams):
        return {f"{prefix}prompt": payload.P}
    out = {}
    for (layer, target), (a, b) in sorted(payload.pairs.items()):
        out[f"{prefix}lora.{layer}.{target}.A"] = a
        out[f"{prefix}lora.{layer}.{target}.B"] = b
    return out


def payload_meta(payload: PromptParams | LoraParams) -> dict:
    if isinstance(payload, PromptParams):
        return {"kind": "prompt", "prompt_length": payload.length}
    return {"kind": "lora", "rank": payload.rank, "alpha": payload.alpha}


def payload_from_named(named: dict[str, np.ndarray], meta: dict, prefix: str = "",
                       requires_grad: bool = True) -> PromptParams | LoraParams:
    if meta["kind"] == "prompt":
        return PromptParams(Tensor(named[f"{prefix}prompt"], requires_grad=requires_grad))
    pairs = {}
    head = f"{prefix}lora."
    for name in named:
        if name.startswith(head) and name.endswith(".A"):
            layer, target = name[len(head):-2].split(".")
            a = Tensor(named[name], requires_grad=requires_grad)
            b = Tensor(named[name[:-2] + ".B"], requires_grad=requires_grad)
            pairs[(int(layer), target)] = (a, b)
    return LoraParams(int(meta["rank"]), pairs, meta.get("alpha"))
