"""Experiment configuration: a line-oriented ``section.key = value`` format.

Blank lines and ``#`` comments are ignored. Lists are comma separated,
booleans are ``true``/``false``, optional values accept ``none``. Unknown
sections or keys are errors, and every error names the offending key.

Example::

    method.name = s_lora
    peft.rank = 4
    stream.scenario = DIL
    run.seeds = 0, 1, 2
"""

from __future__ import annotations

import hashlib
import os
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import StreamSpec, TaskDescriptor, cil_spec, dil_spec
from .train import TrainConfig
from .vit import ConfigError, ViTConfig

METHODS = ("finetune", "s_prompts", "s_lora", "l2p", "l2l", "joint_prompt", "joint_lora", "joint_full")


@dataclass(frozen=True)
class ModelSection:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch_size: int = 8
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 256
    bare_block: bool = False
    halved_attention_scale: bool = False
    outer_gelu: bool = False


@dataclass(frozen=True)
class MethodSection:
    name: str = "s_lora"
    plus_plus: bool = False
    shared_head: bool = False
    forced_routing: bool = False


@dataclass(frozen=True)
class PeftSection:
    prompt_length: int = 10
    rank: int = 1
    targets: tuple[str, ...] = ("q", "v")
    lora_alpha: float | None = None


@dataclass(frozen=True)
class L2XSection:
    pool_size: int = 10
    select_count: int = 5
    lam: float = 0.1
    surrogate: str = "one_minus_cos"


@dataclass(frozen=True)
class SXSection:
    k: int | None = None


@dataclass(frozen=True)
class StreamSection:
    scenario: str = "CIL"
    num_tasks: int = 5
    num_classes: int = 10
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
    paths: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunSection:
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"


@dataclass(frozen=True)
class SweepSection:
    methods: tuple[str, ...] = ()
    rank: tuple[int, ...] = ()
    prompt_length: tuple[int, ...] = ()
    k: tuple[int, ...] = ()
    pool_size: tuple[int, ...] = ()


@dataclass(frozen=True)
class BenchSection:
    batch_size: int = 32
    trials: int = 5
    warmup: int = 3
    batches: int = 4


PRETRAIN_DEFAULT = TrainConfig(epochs=30, lr=0.001, optimizer="adamw", momentum=0.0,
                               weight_decay=0.0, batch_size=64, schedule="cosine")
L2L_DEFAULT = TrainConfig(epochs=5, lr=0.001875, optimizer="sgd", momentum=0.9,
                          weight_decay=0.0, batch_size=16, schedule="constant")
L2P_DEFAULT = TrainConfig(epochs=5, lr=0.001875, optimizer="adamw", momentum=0.0,
                          weight_decay=0.0, batch_size=16, schedule="constant")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = ModelSection()
    method: MethodSection = MethodSection()
    peft: PeftSection = PeftSection()
    l2x: L2XSection = L2XSection()
    sx: SXSection = SXSection()
    stream: StreamSection = StreamSection()
    sx_train: TrainConfig = TrainConfig()
    l2p_train: TrainConfig = L2P_DEFAULT
    l2l_train: TrainConfig = L2L_DEFAULT
    finetune_train: TrainConfig = TrainConfig()
    joint_train: TrainConfig = TrainConfig()
    pretrain: TrainConfig = PRETRAIN_DEFAULT
    run: RunSection = RunSection()
    sweep: SweepSection = SweepSection()
    bench: BenchSection = BenchSection()

    # ------------------------------------------------------------ derived
    def vit_config(self) -> ViTConfig:
        m = self.model
        return ViTConfig(m.image_height, m.image_width, m.channels, m.patch_size, m.hidden_dim,
                         m.num_layers, m.num_heads, m.ffn_dim, self.stream.num_classes,
                         m.bare_block, m.halved_attention_scale, m.outer_gelu)

    def stream_spec(self) -> StreamSpec:
        s, m = self.stream, self.model
        kw = dict(image_height=m.image_height, image_width=m.image_width, channels=m.channels,
                  train_per_class=s.train_per_class, test_per_class=s.test_per_class,
                  noise=s.noise, max_shift=s.max_shift, freq_low=s.freq_low, freq_high=s.freq_high,
                  components=s.components, pretext_classes=s.pretext_classes,
                  pretext_train_per_class=s.pretext_train_per_class,
                  pretext_freq_low=s.pretext_freq_low, pretext_freq_high=s.pretext_freq_high)
        if s.paths:
            tasks = tuple(TaskDescriptor(path=p) for p in s.paths)
            return StreamSpec(scenario=s.scenario, tasks=tasks, **kw)
        if s.scenario == "CIL":
            return cil_spec(s.num_classes, s.num_tasks, **kw)
        return dil_spec(s.num_classes, s.num_tasks, **kw)

    def train_config_for(self, method: str) -> TrainConfig:
        if method in ("s_prompts", "s_lora"):
            return self.sx_train
        if method == "l2p":
            return self.l2p_train
        if method == "l2l":
            return self.l2l_train
        if method == "finetune":
            return self.finetune_train
        return self.joint_train

    def effective_k(self) -> int:
        if self.sx.k is not None:
            return self.sx.k
        if self.stream.scenario == "CIL":
            return 2 * (self.stream.num_classes // self.stream.num_tasks)
        return 5

    def with_values(self, **updates: dict) -> "ExperimentConfig":
        """``cfg.with_values(peft={"rank": 4})`` → a new config with those keys replaced."""
        out = self
        for section, values in updates.items():
            out = replace(out, **{section: replace(getattr(out, section), **values)})
        validate(out)
        return out

    def digest(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()[:12]


# ------------------------------------------------------------------ parsing

class ConfigParseError(ConfigError):
    pass


def _section_types() -> dict[str, type]:
    return {f.name: f.default.__class__ for f in fields(ExperimentConfig)}


def _key_types(section_cls) -> dict[str, object]:
    return typing.get_type_hints(section_cls)


def _parse_value(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none":
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _parse_value(text, inner, key)
    if origin is tuple:
        inner = args[0]
        if not text:
            return ()
        return tuple(_parse_value(p, inner, key) for p in text.split(","))
    try:
        if tp is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        raise ConfigParseError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    raise ConfigParseError(f"{key}: unsupported type {tp}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(source: str | os.PathLike | None = None, text: str | None = None) -> ExperimentConfig:
    """Parse a config file (or ``text``) over the defaults, then validate."""
    if text is None:
        text = Path(source).read_text() if source is not None else ""
    sections = _section_types()
    updates: dict[str, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        name, value = (p.strip() for p in line.split("=", 1))
        if "." not in name:
            raise ConfigParseError(f"line {lineno}: {name}: expected 'section.key'")
        section, key = name.split(".", 1)
        if section not in sections:
            raise ConfigParseError(f"{name}: unknown section {section!r}")
        types_ = _key_types(sections[section])
        if key not in types_:
            raise ConfigParseError(f"{name}: unknown key")
        updates.setdefault(section, {})[key] = _parse_value(value, types_[key], name)
    cfg = ExperimentConfig()
    for section, values in updates.items():
        try:
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **values)})
        except ValueError as err:
            raise ConfigParseError(f"{section}: {err}") from None
    validate(cfg)
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        section = getattr(cfg, f.name)
        for sf in fields(section):
            lines.append(f"{f.name}.{sf.name} = {_format_value(getattr(section, sf.name))}")
    return "\n".join(lines) + "\n"


def validate(cfg: ExperimentConfig) -> None:
    if cfg.method.name not in METHODS:
        raise ConfigParseError(f"method.name: unknown method {cfg.method.name!r}")
    for m in cfg.sweep.methods:
        if m not in METHODS:
            raise ConfigParseError(f"sweep.methods: unknown method {m!r}")
    if cfg.l2x.pool_size < 1:
        raise ConfigParseError("l2x.pool_size: must be ≥ 1")
    if not 1 <= cfg.l2x.select_count <= cfg.l2x.pool_size:
        raise ConfigParseError(f"l2x.select_count: {cfg.l2x.select_count} exceeds "
                               f"l2x.pool_size {cfg.l2x.pool_size}")
    if cfg.l2x.surrogate not in ("one_minus_cos", "raw_gamma"):
        raise ConfigParseError(f"l2x.surrogate: unknown value {cfg.l2x.surrogate!r}")
    if cfg.peft.rank < 1:
        raise ConfigParseError("peft.rank: must be ≥ 1")
    if cfg.peft.prompt_length < 1:
        raise ConfigParseError("peft.prompt_length: must be ≥ 1")
    if not cfg.peft.targets or any(t not in ("q", "k", "v", "o") for t in cfg.peft.targets):
        raise ConfigParseError(f"peft.targets: expected a subset of q,k,v,o, got {cfg.peft.targets}")
    if cfg.sx.k is not None and cfg.sx.k < 1:
        raise ConfigParseError("sx.k: must be ≥ 1")
    if cfg.stream.scenario not in ("CIL", "DIL"):
        raise ConfigParseError(f"stream.scenario: unknown scenario {cfg.stream.scenario!r}")
    if not cfg.stream.paths:
        if cfg.stream.num_tasks < 1:
            raise ConfigParseError("stream.num_tasks: must be ≥ 1")
        if cfg.stream.scenario == "CIL" and cfg.stream.num_classes % cfg.stream.num_tasks:
            raise ConfigParseError("stream.num_classes: must divide evenly into stream.num_tasks")
    if not cfg.run.seeds:
        raise ConfigParseError("run.seeds: at least one seed")
    for name in ("sx_train", "l2p_train", "l2l_train", "finetune_train", "joint_train", "pretrain"):
        tc = getattr(cfg, name)
        if tc.optimizer not in ("sgd", "adamw"):
            raise ConfigParseError(f"{name}.optimizer: unknown optimizer {tc.optimizer!r}")
        if tc.schedule not in ("constant", "cosine"):
            raise ConfigParseError(f"{name}.schedule: unknown schedule {tc.schedule!r}")
        if tc.epochs < 0 or tc.batch_size < 1 or not tc.lr > 0:
            raise ConfigParseError(f"{name}: epochs ≥ 0, batch_size ≥ 1 and lr > 0 required")
    try:
        cfg.vit_config()
    except ConfigError as err:
        raise ConfigParseError(f"model: {err}") from None
