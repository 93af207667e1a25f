"""A small Vision Transformer built on :mod:`peftcl.tensor`.

Each block is attention + residual then FFN + residual, read out at the CLS
position. By default blocks are pre-norm with an attention output
projection; ``bare_block`` drops both. ``halved_attention_scale`` divides
attention logits by ``2*sqrt(d)`` instead of ``sqrt(d)`` and ``outer_gelu``
applies GeLU after the second FFN layer as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .rng import make_rng
from .tensor import Tensor

LN_EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch_size: int = 8
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 256
    num_classes: int = 10
    bare_block: bool = False
    halved_attention_scale: bool = True
    outer_gelu: bool = True

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError("image height and width must be divisible by patch_size")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        for f in ("channels", "patch_size", "hidden_dim", "num_layers", "num_heads",
                  "ffn_dim", "num_classes"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be ≥ 1")

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def use_norms(self) -> bool:
        return not self.bare_block


@dataclass
class Head:
    w: Tensor  # D x C
    b: Tensor  # C

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class BlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor | None
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    ln1_g: Tensor | None = None
    ln1_b: Tensor | None = None
    ln2_g: Tensor | None = None
    ln2_b: Tensor | None = None


@dataclass
class ViTParams:
    patch_embed: Tensor
    pos_encoding: Tensor
    cls_token: Tensor
    blocks: list[BlockParams]
    norm_g: Tensor | None = None
    norm_b: Tensor | None = None
    head: Head | None = None
    frozen: bool = field(default=False)

    def named_tensors(self, include_head: bool = True) -> dict[str, Tensor]:
        out = {"patch_embed": self.patch_embed, "pos_encoding": self.pos_encoding,
               "cls_token": self.cls_token}
        for i, blk in enumerate(self.blocks):
            for f in fields(blk):
                t = getattr(blk, f.name)
                if t is not None:
                    out[f"blocks.{i}.{f.name}"] = t
        if self.norm_g is not None:
            out["norm_g"] = self.norm_g
            out["norm_b"] = self.norm_b
        if include_head and self.head is not None:
            out["head.w"] = self.head.w
            out["head.b"] = self.head.b
        return out

    def backbone_tensors(self) -> list[Tensor]:
        return list(self.named_tensors(include_head=False).values())

    def freeze(self) -> None:
        """Mark the backbone as non-trainable; the head is left alone."""
        for t in self.backbone_tensors():
            t.requires_grad = False
            t.grad = None
        self.frozen = True

    def unfreeze(self) -> None:
        for t in self.backbone_tensors():
            t.requires_grad = True
        self.frozen = False

    def copy(self) -> "ViTParams":
        clone = {k: Tensor(v.data, requires_grad=v.requires_grad)
                 for k, v in self.named_tensors().items()}
        return params_from_named(clone, len(self.blocks), frozen=self.frozen)


def params_from_named(named: dict[str, Tensor], num_layers: int, frozen: bool = False) -> ViTParams:
    blocks = []
    for i in range(num_layers):
        kw = {f.name: named.get(f"blocks.{i}.{f.name}") for f in fields(BlockParams)}
        blocks.append(BlockParams(**kw))
    head = None
    if "head.w" in named:
        head = Head(named["head.w"], named["head.b"])
    return ViTParams(named["patch_embed"], named["pos_encoding"], named["cls_token"], blocks,
                     named.get("norm_g"), named.get("norm_b"), head, frozen)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_head(dim: int, num_classes: int, seed: int, *stream: object) -> Head:
    rng = make_rng(seed, "head", *stream)
    w = rng.normal(0.0, 0.02, size=(dim, num_classes))
    return Head(Tensor(w, requires_grad=True), Tensor(np.zeros(num_classes), requires_grad=True))


def init_vit(cfg: ViTConfig, seed: int, with_head: bool = True) -> ViTParams:
    D, F = cfg.hidden_dim, cfg.ffn_dim
    rng = make_rng(seed, "vit")

    def param(a):
        return Tensor(a, requires_grad=True)

    blocks = []
    for _ in range(cfg.num_layers):
        blocks.append(BlockParams(
            w_q=param(_xavier(rng, D, D)),
            w_k=param(_xavier(rng, D, D)),
            w_v=param(_xavier(rng, D, D)),
            w_o=None if cfg.bare_block else param(_xavier(rng, D, D)),
            w_1=param(_xavier(rng, D, F)),
            b_1=param(np.zeros(F)),
            w_2=param(_xavier(rng, F, D)),
            b_2=param(np.zeros(D)),
            ln1_g=param(np.ones(D)) if cfg.use_norms else None,
            ln1_b=param(np.zeros(D)) if cfg.use_norms else None,
            ln2_g=param(np.ones(D)) if cfg.use_norms else None,
            ln2_b=param(np.zeros(D)) if cfg.use_norms else None,
        ))
    params = ViTParams(
        patch_embed=param(_xavier(rng, cfg.patch_dim, D)),
        pos_encoding=param(rng.normal(0.0, 0.02, size=(cfg.seq_len, D))),
        cls_token=param(rng.normal(0.0, 0.02, size=(1, D))),
        blocks=blocks,
        norm_g=param(np.ones(D)) if cfg.use_norms else None,
        norm_b=param(np.zeros(D)) if cfg.use_norms else None,
    )
    if with_head:
        params.head = init_head(D, cfg.num_classes, seed, "vit")
    return params


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """[B, H, W, C] images -> [B, num_patches, patch_size² · C] row-major patches."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    expected = (cfg.image_height, cfg.image_width, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise T.ShapeError(f"image shape {images.shape[1:]} != {expected}")
    b, p = images.shape[0], cfg.patch_size
    gh, gw = cfg.image_height // p, cfg.image_width // p
    x = images.reshape(b, gh, p, gw, p, cfg.channels).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, gh * gw, p * p * cfg.channels)
    return x[0] if single else x


def patchify_embed(images, cfg: ViTConfig, params: ViTParams) -> Tensor:
    """Embed patches, prepend the CLS token at row 0, add position encoding.

    Accepts one image [H, W, C] (-> [L_S, D]) or a batch [B, H, W, C]
    (-> [B, L_S, D]).
    """
    patches = patchify(images, cfg)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b = patches.shape[0]
    emb = T.matmul(Tensor._wrap(patches), params.patch_embed)
    cls = T.add(params.cls_token, Tensor._wrap(np.zeros((b, 1, cfg.hidden_dim))))
    x = T.concat([cls, emb], axis=1) + params.pos_encoding
    return x[0] if single else x


def _project(x: Tensor, w: Tensor, lora, layer: int, target: str) -> Tensor:
    out = T.matmul(x, w)
    if lora is not None:
        delta = lora.delta(layer, target, x)
        if delta is not None:
            out = out + delta
    return out


def attention(x: Tensor, blk: BlockParams, cfg: ViTConfig, layer: int, lora=None,
              return_weights: bool = False):
    b, n, D = x.shape
    h, d = cfg.num_heads, cfg.head_dim
    q = _project(x, blk.w_q, lora, layer, "q")
    k = _project(x, blk.w_k, lora, layer, "k")
    v = _project(x, blk.w_v, lora, layer, "v")

    def heads(t):
        return T.transpose(T.reshape(t, (b, n, h, d)), (0, 2, 1, 3))

    q, k, v = heads(q), heads(k), heads(v)
    scale = 1.0 / (2.0 * np.sqrt(d)) if cfg.halved_attention_scale else 1.0 / np.sqrt(d)
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * scale
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, D))
    if blk.w_o is not None:
        out = _project(out, blk.w_o, lora, layer, "o")
    return (out, weights) if return_weights else out


def ffn(x: Tensor, blk: BlockParams, cfg: ViTConfig) -> Tensor:
    hidden = T.gelu(T.matmul(x, blk.w_1) + blk.b_1)
    out = T.matmul(hidden, blk.w_2) + blk.b_2
    return T.gelu(out) if cfg.outer_gelu else out


def vit_forward(x: Tensor, params: ViTParams, cfg: ViTConfig, lora=None,
                cls_index: int = 0) -> Tensor:
    """Run every block on an embedded sequence and read out the CLS row.

    ``x`` is [L, D] or [B, L, D] for any L. ``lora``, when given, is any
    object with ``delta(layer, target, z)`` returning the increment to add
    to ``z @ W_target`` (or None). ``cls_index`` is where the CLS token sits
    after any prompt prepending.
    """
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    for layer, blk in enumerate(params.blocks):
        a_in = T.layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS) if cfg.use_norms else x
        x = attention(a_in, blk, cfg, layer, lora) + x
        f_in = T.layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS) if cfg.use_norms else x
        x = ffn(f_in, blk, cfg) + x
    feats = x[:, cls_index, :]
    if cfg.use_norms:
        feats = T.layer_norm(feats, params.norm_g, params.norm_b, LN_EPS)
    return feats[0] if single else feats


def classify(features: Tensor, head: Head) -> Tensor:
    if features.shape[-1] != head.w.shape[0]:
        raise T.ShapeError(f"features dim {features.shape[-1]} != head input {head.w.shape[0]}")
    if features.ndim == 1:
        return T.reshape(T.matmul(T.reshape(features, (1, -1)), head.w), (-1,)) + head.b
    return T.matmul(features, head.w) + head.b


def count_trainable_params(mode: str, cfg: ViTConfig, prompt_length: int = 0, rank: int = 0,
                           targets: tuple[str, ...] = ("q", "v"), include_head: bool = True,
                           num_classes: int | None = None) -> int:
    """Exact trainable-parameter count for ``full``, ``prompt`` or ``lora`` mode."""
    D = cfg.hidden_dim
    c = cfg.num_classes if num_classes is None else num_classes
    head = D * c + c if include_head else 0
    if mode == "prompt":
        if prompt_length < 1:
            raise ConfigError("prompt length must be ≥ 1")
        return prompt_length * D + head
    if mode == "lora":
        if rank < 1:
            raise ConfigError("LoRA rank must be ≥ 1")
        return cfg.num_layers * len(targets) * rank * (D + D) + head
    if mode == "full":
        per_block = 3 * D * D + cfg.ffn_dim * D * 2 + cfg.ffn_dim + D
        if not cfg.bare_block:
            per_block += D * D + 4 * D
        total = cfg.patch_dim * D + cfg.seq_len * D + D + cfg.num_layers * per_block
        if cfg.use_norms:
            total += 2 * D
        return total + head
    raise ConfigError(f"unknown mode {mode!r}")
