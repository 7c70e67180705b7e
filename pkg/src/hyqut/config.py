"""INI-style run configuration: [model], [projector] and [train] sections.

Model keys use the usual Hugging Face names (hidden_size, num_hidden_layers,
...). ``replace`` lists the projections swapped for quantum modules, e.g.
``replace = [FFN_gate]``. ``vocab_size = auto`` defers the vocabulary size to
the tokenizer built from the training corpus.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, DataError
from .model import ModelConfig, ReplacementStrategy
from .qproj import FD_DELTA_RANGE, ProjectorConfig

GRAD_MODES = ("adjoint", "fd")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    total_steps: int = 200
    warmup_steps: int | None = None  # None -> 5% of total_steps
    cycle_steps: int | None = None  # None -> total_steps - warmup_steps
    eta_max: float = 3e-4
    eta_min: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fd_delta: float = 1e-4
    seed: int = 0
    dropout: float = 0.0
    grad_mode: str = "adjoint"
    clip_norm: float = 0.0  # 0 disables clipping
    corpus: str = ""

    def __post_init__(self):
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", int(round(0.05 * self.total_steps)))
        if self.cycle_steps is None:
            object.__setattr__(self, "cycle_steps", max(1, self.total_steps - self.warmup_steps))
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must satisfy 0 <= warmup_steps < total_steps")
        if self.cycle_steps < 1:
            raise ConfigError("cycle_steps must be positive")
        if not 0 < self.eta_min <= self.eta_max:
            raise ConfigError("learning rates must satisfy 0 < eta_min <= eta_max")
        lo, hi = FD_DELTA_RANGE
        if not lo <= self.fd_delta <= hi:
            raise ConfigError(f"fd_delta must lie in [{lo:g}, {hi:g}]")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"grad_mode must be one of {GRAD_MODES}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)


_MODEL_INT = ("vocab_size", "hidden_size", "num_hidden_layers", "num_attention_heads",
              "num_key_value_heads", "intermediate_size", "max_position_embeddings", "seq_len")
_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(section: str, key: str, raw: str, kind: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, vocab_size: int | None = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(cp.sections()) - {"model", "projector", "train"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    proj_kw = {}
    if cp.has_section("projector"):
        for key, raw in cp.items("projector"):
            if key in ("n_q", "n_layers"):
                proj_kw[key] = _convert("projector", key, raw, "int")
            elif key in ("variant", "expand_mode"):
                proj_kw[key] = raw.strip()
            else:
                raise ConfigError(f"[projector] unknown key {key!r}")
    proj_kw.setdefault("variant", "A8M")

    model_kw = {}
    if cp.has_section("model"):
        for key, raw in cp.items("model"):
            if key == "vocab_size" and raw.strip().lower() == "auto":
                if vocab_size is None:
                    raise ConfigError("[model] vocab_size: 'auto' needs a corpus-derived vocabulary")
                model_kw[key] = vocab_size
            elif key in _MODEL_INT:
                model_kw[key] = _convert("model", key, raw, "int")
            elif key == "replace":
                model_kw[key] = ReplacementStrategy.parse(raw)
            elif key == "ffn_type":
                model_kw[key] = raw.strip()
            elif key == "per_head":
                model_kw[key] = _convert("model", key, raw, "bool")
            elif key == "norm_eps":
                model_kw[key] = _convert("model", key, raw, "float")
            else:
                raise ConfigError(f"[model] unknown key {key!r}")
    if vocab_size is not None and model_kw.get("vocab_size", vocab_size) != vocab_size:
        raise ConfigError(
            f"[model] vocab_size: config says {model_kw['vocab_size']}, tokenizer has {vocab_size}"
        )

    train_kw = {}
    if cp.has_section("train"):
        for key, raw in cp.items("train"):
            if key not in _TRAIN_TYPES:
                raise ConfigError(f"[train] unknown key {key!r}")
            kind = _TRAIN_TYPES[key]
            if "int" in kind:
                train_kw[key] = _convert("train", key, raw, "int")
            elif "float" in kind:
                train_kw[key] = _convert("train", key, raw, "float")
            else:
                train_kw[key] = raw.strip()
    try:
        projector = ProjectorConfig(**proj_kw)
        model = ModelConfig(projector=projector, **model_kw)
        train = TrainConfig(**train_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model, train)


def load_config(path, vocab_size: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, vocab_size)


def config_value(path, section: str, key: str, default: str = "") -> str:
    """One raw value, read without validating the rest of the file."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        if not cp.read(path, encoding="utf-8"):
            raise DataError(f"cannot read config {path}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return cp.get(section, key, fallback=default).strip()


def config_needs_vocab(path) -> bool:
    return config_value(path, "model", "vocab_size").lower() == "auto"


def dump_config(run: RunConfig) -> str:
    """Canonical text form (stable key order, fully resolved values)."""
    m, p, t = run.model, run.model.projector, run.train
    lines = ["[model]"]
    for key in _MODEL_INT:
        lines.append(f"{key} = {getattr(m, key)}")
    lines += [f"replace = {m.replace}", f"ffn_type = {m.ffn_type}",
              f"per_head = {str(m.per_head).lower()}", f"norm_eps = {m.norm_eps!r}", ""]
    lines += ["[projector]", f"n_q = {p.n_q}", f"n_layers = {p.n_layers}",
              f"variant = {p.variant}", f"expand_mode = {p.expand_mode}", ""]
    lines.append("[train]")
    for f in fields(TrainConfig):
        v = getattr(t, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_diff(a: RunConfig, b: RunConfig) -> list[str]:
    """Field-level differences as ``section.key: a != b`` strings."""
    out = []
    pairs = [("model", a.model, b.model), ("projector", a.model.projector, b.model.projector),
             ("train", a.train, b.train)]
    for section, x, y in pairs:
        for f in fields(x):
            if f.name == "projector":
                continue
            vx, vy = getattr(x, f.name), getattr(y, f.name)
            if vx != vy:
                out.append(f"{section}.{f.name}: {vx} != {vy}")
    return out


def with_overrides(run: RunConfig, *, model=None, projector=None, train=None) -> RunConfig:
    m = run.model
    if projector:
        m = replace(m, projector=replace(m.projector, **projector))
    if model:
        m = replace(m, **model)
    t = replace(run.train, **train) if train else run.train
    return RunConfig(m, t)
