"""Decoder-only transformer with swappable quantum projections.

Layout follows the usual LLaMA-style naming (weights stored (out, in)):
pre-norm residual blocks, grouped key/value heads, gated GELU feed-forward,
and an output head tied to the token embedding plus a bias vector. Position
information is a fixed sinusoidal table, so it contributes no parameters.

Everything is float64 numpy with hand-written backward passes. Modules keep
the cache of their last forward call; ``backward`` consumes it and
accumulates into ``grads``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, UsageError
from .ops import gelu, gelu_grad, log_softmax, softmax
from .qproj import ProjectorConfig, QuantumProjector

REPLACE_TARGETS = ("Wq", "Wk", "Wv", "Wo", "FFN_gate", "FFN_up", "FFN_down")
TARGET_PATH = {
    "Wq": "self_attn.q_proj",
    "Wk": "self_attn.k_proj",
    "Wv": "self_attn.v_proj",
    "Wo": "self_attn.o_proj",
    "FFN_gate": "mlp.gate_proj",
    "FFN_up": "mlp.up_proj",
    "FFN_down": "mlp.down_proj",
}
FFN_TYPES = ("gated", "plain")
POSITION_SCALE = 0.02


@dataclass(frozen=True)
class ReplacementStrategy:
    targets: frozenset = frozenset()

    def __post_init__(self):
        bad = set(self.targets) - set(REPLACE_TARGETS)
        if bad:
            raise ConfigError(f"unknown replacement target(s) {sorted(bad)}; choose from {REPLACE_TARGETS}")
        object.__setattr__(self, "targets", frozenset(self.targets))

    @classmethod
    def parse(cls, text: str | Iterable[str]) -> "ReplacementStrategy":
        if isinstance(text, str):
            text = text.strip().strip("[]")
            items = [t.strip().strip("'\"") for t in text.split(",")]
        else:
            items = list(text)
        return cls(frozenset(t for t in items if t and t.lower() != "none"))

    def __contains__(self, item) -> bool:
        return item in self.targets

    def __str__(self) -> str:
        return "[" + ", ".join(t for t in REPLACE_TARGETS if t in self.targets) + "]"


# the seven ablation rows, in reporting order
ABLATION_STRATEGIES = (
    ("None (Classical Baseline)", ReplacementStrategy()),
    ("Attention: Wq", ReplacementStrategy(frozenset({"Wq"}))),
    ("Attention: Wq, Wk, Wv", ReplacementStrategy(frozenset({"Wq", "Wk", "Wv"}))),
    ("Attention: Wq, Wk, Wv, Wo", ReplacementStrategy(frozenset({"Wq", "Wk", "Wv", "Wo"}))),
    ("FFN: Wgate", ReplacementStrategy(frozenset({"FFN_gate"}))),
    ("FFN: Wgate, Wup, Wdown", ReplacementStrategy(frozenset({"FFN_gate", "FFN_up", "FFN_down"}))),
    ("All Linear Layers", ReplacementStrategy(frozenset(REPLACE_TARGETS))),
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 6401
    hidden_size: int = 512
    num_hidden_layers: int = 2
    num_attention_heads: int = 8
    num_key_value_heads: int = 2
    intermediate_size: int = 1024
    max_position_embeddings: int = 4096
    seq_len: int = 512
    replace: ReplacementStrategy = field(default_factory=ReplacementStrategy)
    projector: ProjectorConfig = field(default_factory=lambda: ProjectorConfig(variant="A8M"))
    ffn_type: str = "gated"
    per_head: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "hidden_size", "num_hidden_layers", "num_attention_heads",
                     "num_key_value_heads", "intermediate_size", "max_position_embeddings", "seq_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.hidden_size % self.num_attention_heads:
            raise ConfigError("hidden_size must be divisible by num_attention_heads")
        if self.num_attention_heads % self.num_key_value_heads:
            raise ConfigError("num_attention_heads must be divisible by num_key_value_heads")
        if self.ffn_type not in FFN_TYPES:
            raise ConfigError(f"ffn_type must be one of {FFN_TYPES}, got {self.ffn_type!r}")
        if self.ffn_type == "plain" and "FFN_gate" in self.replace:
            raise ConfigError("plain FFN has no gate projection to replace")
        if self.seq_len > self.max_position_embeddings:
            raise ConfigError("seq_len exceeds max_position_embeddings")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_attention_heads

    @property
    def kv_dim(self) -> int:
        return self.num_key_value_heads * self.head_dim

    def with_replace(self, strategy) -> "ModelConfig":
        if not isinstance(strategy, ReplacementStrategy):
            strategy = ReplacementStrategy.parse(strategy)
        return replace(self, replace=strategy)

    def projection_dims(self) -> dict[str, tuple[int, int]]:
        """(d_in, d_out) of every replaceable projection."""
        d, kv, inter = self.hidden_size, self.kv_dim, self.intermediate_size
        return {
            "Wq": (d, d), "Wk": (d, kv), "Wv": (d, kv), "Wo": (d, d),
            "FFN_gate": (d, inter), "FFN_up": (d, inter), "FFN_down": (inter, d),
        }

    def projection_parts(self, target: str) -> int:
        """How many independent projectors make up a replaced target."""
        if not self.per_head:
            return 1
        if target == "Wq":
            return self.num_attention_heads
        if target in ("Wk", "Wv"):
            return self.num_key_value_heads
        return 1


def classic_8m(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def hyqut_8m(**kw) -> ModelConfig:
    kw.setdefault("replace", ReplacementStrategy(frozenset({"FFN_gate"})))
    return ModelConfig(**kw)


def classic_150m(**kw) -> ModelConfig:
    base = dict(hidden_size=1024, num_hidden_layers=16, num_attention_heads=8,
                num_key_value_heads=2, intermediate_size=2048,
                max_position_embeddings=32768, seq_len=512,
                projector=ProjectorConfig(variant="B150M"))
    base.update(kw)
    return ModelConfig(**base)


def hyqut_150m(**kw) -> ModelConfig:
    kw.setdefault("replace", ReplacementStrategy(frozenset({"Wq"})))
    return classic_150m(**kw)


# ----------------------------------------------------------------------------
# functional pieces
# ----------------------------------------------------------------------------

def layer_norm(x, gamma, beta=None, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps) * gamma
    return y if beta is None else y + beta


def causal_mask(L: int) -> np.ndarray:
    mask = np.zeros((L, L))
    mask[np.triu_indices(L, k=1)] = -np.inf
    return mask


def attention(Q, K, V, mask=None):
    """softmax(Q K^T / sqrt(d_k) + mask) V over the last two axes.

    Returns (output, weights).
    """
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise UsageError(f"attention shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    scores = Q @ np.swapaxes(K, -1, -2) / np.sqrt(Q.shape[-1])
    if mask is not None:
        scores = scores + mask
    A = softmax(scores, axis=-1)
    return A @ V, A


def sinusoidal_positions(L: int, d: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(d)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


# ----------------------------------------------------------------------------
# modules
# ----------------------------------------------------------------------------

class Module:
    params: dict
    grads: dict

    def children(self) -> dict:
        return {}

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0
        for c in self.children().values():
            c.zero_grad()


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    for k, v in obj.params.items():
        yield prefix + k, v
    children = obj.children() if hasattr(obj, "children") else {}
    for name, child in children.items():
        yield from named_parameters(child, prefix + name + ".")


def named_grads(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    for k, v in obj.grads.items():
        yield prefix + k, v
    children = obj.children() if hasattr(obj, "children") else {}
    for name, child in children.items():
        yield from named_grads(child, prefix + name + ".")


class Linear(Module):
    def __init__(self, d_in, d_out, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        lim = 1 / np.sqrt(d_in)
        self.params = {"weight": rng.uniform(-lim, lim, (d_out, d_in))}
        if bias:
            self.params["bias"] = np.zeros(d_out)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.cache = None

    def forward(self, x):
        self.cache = x
        y = x @ self.params["weight"].T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        x = self.cache
        d_out, d_in = self.params["weight"].shape
        self.grads["weight"] += dy.reshape(-1, d_out).T @ x.reshape(-1, d_in)
        if "bias" in self.params:
            self.grads["bias"] += dy.reshape(-1, d_out).sum(axis=0)
        return dy @ self.params["weight"]


class QuantumProjection(Module):
    """One QuantumProjector, or ``parts`` of them whose outputs are concatenated
    (one circuit per attention head)."""

    def __init__(self, d_in, d_out, cfg: ProjectorConfig, parts=1, rng=None):
        if d_out % parts:
            raise ConfigError(f"cannot split width {d_out} into {parts} projectors")
        self.parts = [QuantumProjector(d_in, d_out // parts, cfg, rng) for _ in range(parts)]
        if parts == 1:
            self.params, self.grads = self.parts[0].params, self.parts[0].grads
        else:
            self.params, self.grads = {}, {}

    def children(self):
        if len(self.parts) == 1:
            return {}
        return {f"heads.{i}": p for i, p in enumerate(self.parts)}

    def zero_grad(self):
        for p in self.parts:
            p.zero_grad()

    def forward(self, x):
        outs = [p.forward(x) for p in self.parts]
        return outs[0] if len(outs) == 1 else np.concatenate(outs, axis=-1)

    def backward(self, dy):
        if len(self.parts) == 1:
            return self.parts[0].backward(dy)
        chunks = np.split(dy, len(self.parts), axis=-1)
        dx = 0.0
        for p, c in zip(self.parts, chunks):
            dx = dx + p.backward(c)
        return dx


class LayerNorm(Module):
    """Feature-axis normalisation with a learned scale (no shift parameter)."""

    def __init__(self, d, eps=1e-5):
        self.eps = eps
        self.params = {"weight": np.ones(d)}
        self.grads = {"weight": np.zeros(d)}
        self.cache = None

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self.cache = (xhat, inv)
        return xhat * self.params["weight"]

    def backward(self, dy):
        xhat, inv = self.cache
        d = xhat.shape[-1]
        self.grads["weight"] += (dy * xhat).reshape(-1, d).sum(axis=0)
        dxhat = dy * self.params["weight"]
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


def _projection(cfg: ModelConfig, target: str, bias: bool, rng) -> Module:
    d_in, d_out = cfg.projection_dims()[target]
    if target in cfg.replace:
        return QuantumProjection(d_in, d_out, cfg.projector, cfg.projection_parts(target), rng)
    return Linear(d_in, d_out, bias=bias, rng=rng)


class SelfAttention(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.h = cfg.num_attention_heads
        self.kvh = cfg.num_key_value_heads
        self.dk = cfg.head_dim
        self.q_proj = _projection(cfg, "Wq", False, rng)
        self.k_proj = _projection(cfg, "Wk", False, rng)
        self.v_proj = _projection(cfg, "Wv", False, rng)
        self.o_proj = _projection(cfg, "Wo", False, rng)
        self.params, self.grads = {}, {}
        self.cache = None

    def children(self):
        return {"q_proj": self.q_proj, "k_proj": self.k_proj,
                "v_proj": self.v_proj, "o_proj": self.o_proj}

    def _heads(self, x, n):
        B, L, _ = x.shape
        return x.reshape(B, L, n, self.dk).transpose(0, 2, 1, 3)

    def forward(self, x):
        B, L, _ = x.shape
        group = self.h // self.kvh
        q = self._heads(self.q_proj.forward(x), self.h)
        k = np.repeat(self._heads(self.k_proj.forward(x), self.kvh), group, axis=1)
        v = np.repeat(self._heads(self.v_proj.forward(x), self.kvh), group, axis=1)
        out, A = attention(q, k, v, causal_mask(L))
        self.cache = (q, k, v, A)
        merged = out.transpose(0, 2, 1, 3).reshape(B, L, self.h * self.dk)
        return self.o_proj.forward(merged)

    def backward(self, dy):
        q, k, v, A = self.cache
        B, _, L, _ = q.shape
        group = self.h // self.kvh
        dmerged = self.o_proj.backward(dy)
        dout = self._heads(dmerged, self.h)
        dA = dout @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(A, -1, -2) @ dout
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / np.sqrt(self.dk)
        dq = dS @ k
        dk = np.swapaxes(dS, -1, -2) @ q
        dk = dk.reshape(B, self.kvh, group, L, self.dk).sum(axis=2)
        dv = dv.reshape(B, self.kvh, group, L, self.dk).sum(axis=2)

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(B, L, -1)

        return (self.q_proj.backward(merge(dq))
                + self.k_proj.backward(merge(dk))
                + self.v_proj.backward(merge(dv)))


class FeedForward(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.gated = cfg.ffn_type == "gated"
        self.gate_proj = _projection(cfg, "FFN_gate", True, rng) if self.gated else None
        self.up_proj = _projection(cfg, "FFN_up", True, rng)
        self.down_proj = _projection(cfg, "FFN_down", True, rng)
        self.params, self.grads = {}, {}
        self.cache = None

    def children(self):
        # registration order mirrors the published parameter table
        out = {"gate_proj": self.gate_proj} if self.gated else {}
        out.update(down_proj=self.down_proj, up_proj=self.up_proj)
        return out

    def forward(self, x):
        u = self.up_proj.forward(x)
        if self.gated:
            g = self.gate_proj.forward(x)
            a = gelu(g)
            self.cache = (g, a, u)
            return self.down_proj.forward(a * u)
        self.cache = (u,)
        return self.down_proj.forward(gelu(u))

    def backward(self, dy):
        dp = self.down_proj.backward(dy)
        if self.gated:
            g, a, u = self.cache
            return self.gate_proj.backward(dp * u * gelu_grad(g)) + self.up_proj.backward(dp * a)
        (u,) = self.cache
        return self.up_proj.backward(dp * gelu_grad(u))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.input_layernorm = LayerNorm(cfg.hidden_size, cfg.norm_eps)
        self.self_attn = SelfAttention(cfg, rng)
        self.post_attention_layernorm = LayerNorm(cfg.hidden_size, cfg.norm_eps)
        self.mlp = FeedForward(cfg, rng)
        self.params, self.grads = {}, {}
        self.cache = None

    def children(self):
        return {"input_layernorm": self.input_layernorm, "self_attn": self.self_attn,
                "post_attention_layernorm": self.post_attention_layernorm, "mlp": self.mlp}

    def forward(self, x, dropout=0.0, rng=None):
        m1 = _dropout_mask(x.shape, dropout, rng)
        a = self.self_attn.forward(self.input_layernorm.forward(x))
        x1 = x + (a if m1 is None else a * m1)
        m2 = _dropout_mask(x.shape, dropout, rng)
        f = self.mlp.forward(self.post_attention_layernorm.forward(x1))
        self.cache = (m1, m2)
        return x1 + (f if m2 is None else f * m2)

    def backward(self, dy):
        m1, m2 = self.cache
        df = dy if m2 is None else dy * m2
        dx1 = dy + self.post_attention_layernorm.backward(self.mlp.backward(df))
        da = dx1 if m1 is None else dx1 * m1
        return dx1 + self.input_layernorm.backward(self.self_attn.backward(da))


def layer_forward(X, layer: DecoderLayer, dropout_rate=0.0, train_flag=False, rng=None):
    return layer.forward(X, dropout_rate if train_flag else 0.0, rng)


def _dropout_mask(shape, rate, rng):
    if rate <= 0.0:
        return None
    if rng is None:
        raise UsageError("dropout needs an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


class Transformer(Module):
    """The full language model. ``forward`` maps token ids (B, L) to logits (B, L, V)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        V, d = cfg.vocab_size, cfg.hidden_size
        self.params = {"model.embed_tokens.embedding_table": rng.normal(0.0, 0.02, (V, d))}
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.num_hidden_layers)]
        self.norm = LayerNorm(d, cfg.norm_eps)
        self.head_bias = {"bias": np.zeros(V)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.head_grads = {k: np.zeros_like(v) for k, v in self.head_bias.items()}
        self.cache = None

    def children(self):
        out = {f"layers.{i}": layer for i, layer in enumerate(self.layers)}
        out["model.norm"] = self.norm
        out["lm_head"] = _Bias(self.head_bias, self.head_grads)
        return out

    def named_parameters(self) -> dict[str, np.ndarray]:
        return dict(named_parameters(self))

    def named_grads(self) -> dict[str, np.ndarray]:
        return dict(named_grads(self))

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.named_parameters().values()))

    def projectors(self) -> dict[str, QuantumProjector]:
        """Every QuantumProjector keyed by its parameter prefix."""
        out = {}
        for i, layer in enumerate(self.layers):
            for target, path in TARGET_PATH.items():
                mod = layer
                for part in path.split("."):
                    mod = getattr(mod, part, None)
                if isinstance(mod, QuantumProjection):
                    base = f"layers.{i}.{path}."
                    if len(mod.parts) == 1:
                        out[base] = mod.parts[0]
                    else:
                        for j, p in enumerate(mod.parts):
                            out[f"{base}heads.{j}."] = p
        return out

    def forward(self, tokens, train=False, dropout=0.0, rng=None):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
            raise UsageError(f"tokens must be an integer array (B, L), got {tokens.dtype} {tokens.shape}")
        B, L = tokens.shape
        if L > self.cfg.max_position_embeddings:
            raise UsageError(f"sequence length {L} exceeds max_position_embeddings")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise UsageError(f"token id out of range for vocab_size {self.cfg.vocab_size}")
        E = self.params["model.embed_tokens.embedding_table"]
        x = E[tokens] + POSITION_SCALE * sinusoidal_positions(L, self.cfg.hidden_size)
        rate = dropout if train else 0.0
        for layer in self.layers:
            x = layer.forward(x, rate, rng)
        h = self.norm.forward(x)
        self.cache = (tokens, h)
        return h @ E.T + self.head_bias["bias"]

    __call__ = forward

    def backward(self, dlogits):
        tokens, h = self.cache
        E = self.params["model.embed_tokens.embedding_table"]
        V, d = E.shape
        dE = self.grads["model.embed_tokens.embedding_table"]
        self.head_grads["bias"] += dlogits.reshape(-1, V).sum(axis=0)
        dE += dlogits.reshape(-1, V).T @ h.reshape(-1, d)
        dx = self.norm.backward(dlogits @ E)
        for layer in reversed(self.layers):
            dx = layer.backward(dx)
        np.add.at(dE, tokens.reshape(-1), dx.reshape(-1, d))
        return dx


class _Bias:
    def __init__(self, params, grads):
        self.params, self.grads = params, grads

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0


def model_forward(tokens, model: Transformer) -> np.ndarray:
    return model.forward(tokens)


def multi_head(X, layer: DecoderLayer) -> np.ndarray:
    return layer.self_attn.forward(X)


def ffn(X, layer: DecoderLayer) -> np.ndarray:
    return layer.mlp.forward(X)


def sequence_log_probs(logits) -> np.ndarray:
    return log_softmax(logits, axis=-1)


def generate(prompt, model: Transformer, max_new: int, temperature: float = 0.0, seed: int = 0):
    """Autoregressive sampling; temperature 0 means greedy argmax."""
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise UsageError("generate needs a non-empty prompt")
    if temperature < 0:
        raise UsageError("temperature must be >= 0")
    if max_new < 0:
        raise UsageError("max_new must be >= 0")
    rng = np.random.default_rng(seed)
    window = model.cfg.max_position_embeddings
    for _ in range(max_new):
        ctx = np.array(tokens[-window:], dtype=np.int64)[None]
        logits = model.forward(ctx)[0, -1]
        if temperature == 0:
            nxt = int(np.argmax(logits))
        else:
            p = softmax(logits / temperature)
            nxt = int(rng.choice(p.size, p=p))
        tokens.append(nxt)
    return tokens
