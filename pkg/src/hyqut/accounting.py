"""Parameter counting and FLOPs estimation.

Counts are computed from shape rules alone (they never build a model), so a
test can compare them against a live ``Transformer`` to catch drift.

FLOPs estimator, per token:

* projections: 2 x the multiply-accumulates of every weight matrix, the tied
  output head (d x V) included and biases ignored. A quantum projection is
  costed as the dense layers it stands in for: d_in x 2n_q for the
  compression, 2n_q x n_q for the circuit and k x d_out for the expansion
  (k = 1 in scalar mode, n_q in full mode);
* attention (optional): 4 x seq_len x d_model per layer for Q K^T and A V.

``classical_percentage`` compares the projection term only; the attention
term does not depend on the replacement strategy and would only dilute it.
``training_flops`` is the usual 6 x MACs x tokens rule for one optimiser step.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources

from .model import REPLACE_TARGETS, ABLATION_STRATEGIES, TARGET_PATH, ModelConfig, ReplacementStrategy
from .qproj import AnsatzDescriptor, ProjectorConfig, QuantumProjector

BYTES_PER_PARAM = 4  # memory column assumes 32-bit floats


@dataclass(frozen=True)
class Entry:
    name: str
    shape: tuple[int, ...]

    @property
    def count(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    @property
    def mb(self) -> float:
        return self.count * BYTES_PER_PARAM / 2**20


def format_shape(shape) -> str:
    return "(" + ", ".join(str(s) for s in shape) + (",)" if len(shape) == 1 else ")")


def format_mb(mb: float) -> str:
    return "<0.01" if mb < 0.005 else f"{mb:.2f}"


@dataclass
class ResourceReport:
    """Named entries plus projection FLOPs for one sequence and the share of
    the all-classical FLOPs they represent."""

    config: ModelConfig
    entries: list[Entry]
    flops: int = 0
    percentage: float = 100.0

    @property
    def total(self) -> int:
        return sum(e.count for e in self.entries)

    @property
    def memory_mb(self) -> float:
        return self.total * BYTES_PER_PARAM / 2**20

    def collapsed(self) -> list[Entry]:
        """Entries with per-layer rows folded to ``layers.N.`` when all layers match."""
        per_layer, others_head, others_tail = {}, [], []
        for e in self.entries:
            if e.name.startswith("layers."):
                idx, rest = e.name[len("layers."):].split(".", 1)
                per_layer.setdefault(int(idx), []).append(Entry("layers.N." + rest, e.shape))
            elif per_layer:
                others_tail.append(e)
            else:
                others_head.append(e)
        blocks = list(per_layer.values())
        if blocks and all(b == blocks[0] for b in blocks):
            return others_head + blocks[0] + others_tail
        return list(self.entries)

    def rows(self, collapse: bool = True) -> list[tuple[str, str, int, str]]:
        entries = self.collapsed() if collapse else self.entries
        return [(e.name, format_shape(e.shape), e.count, format_mb(e.mb)) for e in entries]

    def to_text(self, collapse: bool = True) -> str:
        rows = self.rows(collapse)
        total = ("Total", "-", self.total, f"{self.memory_mb:.2f} MB")
        w0 = max(len(r[0]) for r in rows + [total])
        w1 = max(len(r[1]) for r in rows + [total])
        w2 = max(len(f"{r[2]:,}") for r in rows + [total])
        lines = []
        for name, shape, count, mb in rows + [total]:
            lines.append(f"{name:<{w0}}  {shape:<{w1}}  {count:>{w2},}  {mb:>8}")
        if collapse and self.config.num_hidden_layers > 1 and rows != self.rows(False):
            lines.insert(0, f"(layers.N rows repeat for {self.config.num_hidden_layers} layers)")
        return "\n".join(lines) + "\n"

    def to_csv(self, collapse: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "shape", "count", "mb"])
        for row in self.rows(collapse):
            w.writerow(row)
        w.writerow(["Total", "-", self.total, f"{self.memory_mb:.2f}"])
        return buf.getvalue()


# ----------------------------------------------------------------------------
# parameter counts
# ----------------------------------------------------------------------------

def _resolve(config: ModelConfig, strategy) -> ModelConfig:
    return config if strategy is None else config.with_replace(strategy)


def _projection_entries(cfg: ModelConfig, target: str, prefix: str, bias: bool) -> list[Entry]:
    d_in, d_out = cfg.projection_dims()[target]
    if target not in cfg.replace:
        out = [Entry(prefix + "weight", (d_out, d_in))]
        return out + [Entry(prefix + "bias", (d_out,))] if bias else out
    parts = cfg.projection_parts(target)
    shapes = cfg.projector.param_shapes(d_in, d_out // parts)
    if parts == 1:
        return [Entry(prefix + k, s) for k, s in shapes.items()]
    return [Entry(f"{prefix}heads.{i}.{k}", s) for i in range(parts) for k, s in shapes.items()]


def count_params(config: ModelConfig, strategy=None) -> ResourceReport:
    """Named parameter entries in model registration order.

    Attention projections carry no bias; feed-forward projections do. The
    output head reuses the token embedding and adds only a bias vector.
    """
    cfg = _resolve(config, strategy)
    V, d = cfg.vocab_size, cfg.hidden_size
    entries = [Entry("model.embed_tokens.embedding_table", (V, d))]
    ffn_targets = ("FFN_gate", "FFN_down", "FFN_up") if cfg.ffn_type == "gated" else ("FFN_down", "FFN_up")
    for i in range(cfg.num_hidden_layers):
        p = f"layers.{i}."
        entries.append(Entry(p + "input_layernorm.weight", (d,)))
        for t in ("Wq", "Wk", "Wv", "Wo"):
            entries += _projection_entries(cfg, t, p + TARGET_PATH[t] + ".", bias=False)
        entries.append(Entry(p + "post_attention_layernorm.weight", (d,)))
        for t in ffn_targets:
            entries += _projection_entries(cfg, t, p + TARGET_PATH[t] + ".", bias=True)
    entries += [Entry("model.norm.weight", (d,)), Entry("lm_head.bias", (V,))]
    report = ResourceReport(cfg, entries)
    report.flops = estimate_flops(cfg, include_attention=False)
    report.percentage = classical_percentage(cfg)
    return report


def parameter_reduction(baseline: ModelConfig, hybrid: ModelConfig) -> float:
    """Percent fewer parameters in ``hybrid`` than in ``baseline``."""
    b, h = count_params(baseline).total, count_params(hybrid).total
    return 100.0 * (b - h) / b


# ----------------------------------------------------------------------------
# FLOPs
# ----------------------------------------------------------------------------

def _dense_equivalent_macs(pcfg: ProjectorConfig, d_in: int, d_out: int) -> int:
    n = pcfg.n_q
    k = 1 if pcfg.expand_mode == "scalar" else n
    return d_in * 2 * n + 2 * n * n + k * d_out


def projection_macs(config: ModelConfig, strategy=None) -> int:
    """Multiply-accumulates per token over all weight matrices (biases excluded)."""
    cfg = _resolve(config, strategy)
    dims = cfg.projection_dims()
    targets = [t for t in REPLACE_TARGETS if cfg.ffn_type == "gated" or t != "FFN_gate"]
    per_layer = 0
    for t in targets:
        d_in, d_out = dims[t]
        if t in cfg.replace:
            parts = cfg.projection_parts(t)
            per_layer += parts * _dense_equivalent_macs(cfg.projector, d_in, d_out // parts)
        else:
            per_layer += d_in * d_out
    return cfg.num_hidden_layers * per_layer + cfg.hidden_size * cfg.vocab_size


def estimate_flops(config: ModelConfig, strategy=None, seq_len: int | None = None,
                   batch_size: int = 1, include_attention: bool = True) -> int:
    """Forward-pass FLOPs for ``batch_size`` sequences of ``seq_len`` tokens."""
    cfg = _resolve(config, strategy)
    L = cfg.seq_len if seq_len is None else seq_len
    per_token = 2 * projection_macs(cfg)
    if include_attention:
        per_token += cfg.num_hidden_layers * 4 * L * cfg.hidden_size
    return per_token * L * batch_size


def training_flops(config: ModelConfig, strategy=None, seq_len: int | None = None, batch_size: int = 32) -> int:
    """Forward plus backward cost of one step: 6 x MACs x tokens."""
    cfg = _resolve(config, strategy)
    L = cfg.seq_len if seq_len is None else seq_len
    return 6 * projection_macs(cfg) * L * batch_size


def classical_percentage(config: ModelConfig, strategy=None) -> float:
    """Projection FLOPs of the configuration relative to its all-classical twin."""
    cfg = _resolve(config, strategy)
    base = cfg.with_replace(ReplacementStrategy())
    return 100.0 * projection_macs(cfg) / projection_macs(base)


# ----------------------------------------------------------------------------
# quantum census
# ----------------------------------------------------------------------------

def gate_and_param_census(obj) -> tuple[int, int]:
    """(ansatz gate count, trainable circuit parameters).

    Accepts an AnsatzDescriptor, a ProjectorConfig or a QuantumProjector.
    Encoding gates are not counted.
    """
    if isinstance(obj, QuantumProjector):
        obj = obj.ansatz
    if isinstance(obj, ProjectorConfig):
        obj = obj.ansatz()
    if not isinstance(obj, AnsatzDescriptor):
        raise TypeError(f"expected an ansatz, projector config or projector, got {type(obj).__name__}")
    return obj.gate_count, obj.n_params


# ----------------------------------------------------------------------------
# tables
# ----------------------------------------------------------------------------

@dataclass
class AblationRow:
    label: str
    strategy: ReplacementStrategy
    params: int
    percentage: float
    flops: int

    @property
    def params_m(self) -> float:
        return self.params / 1e6


def ablation_table(config: ModelConfig, seq_len: int | None = None, batch_size: int = 32) -> list[AblationRow]:
    """The seven replacement strategies applied to ``config``."""
    rows = []
    for label, strategy in ABLATION_STRATEGIES:
        cfg = config.with_replace(strategy)
        rows.append(AblationRow(label, strategy, count_params(cfg).total,
                                classical_percentage(cfg), training_flops(cfg, seq_len=seq_len,
                                                                          batch_size=batch_size)))
    return rows


def format_ablation(rows: list[AblationRow], verdicts: dict | None = None) -> str:
    head = f"{'Replacement Target':<28}  {'Params':>10}  {'Params (M)':>10}  {'FLOPs (B)':>10}  {'Classical %':>11}"
    if verdicts is not None:
        head += "  Smoke"
    lines = [head]
    for r in rows:
        line = (f"{r.label:<28}  {r.params:>10,}  {r.params_m:>10.3f}  {r.flops / 1e9:>10.1f}"
                f"  {r.percentage:>11.2f}")
        if verdicts is not None:
            line += "  " + verdicts.get(r.label, "-")
        lines.append(line)
    return "\n".join(lines) + "\n"


@dataclass
class ResourceComparison:
    label: str
    params: int
    reduction: float | None
    flops: int


def resource_table(pairs) -> list[ResourceComparison]:
    """``pairs`` is a sequence of (label, baseline, hybrid-or-None) configs."""
    out = []
    for label, base, hybrid in pairs:
        cfg = base if hybrid is None else hybrid
        red = None if hybrid is None else parameter_reduction(base, hybrid)
        out.append(ResourceComparison(label, count_params(cfg).total, red, training_flops(cfg)))
    return out


# ----------------------------------------------------------------------------
# golden fixture
# ----------------------------------------------------------------------------

def reference_fixture() -> str:
    return resources.files("hyqut").joinpath("data/hyqut8m_params.csv").read_text(encoding="utf-8")


def golden_diff(report: ResourceReport, fixture: str | None = None) -> list[str]:
    """Differences between the collapsed report and a (name, shape, count) CSV fixture."""
    fixture = reference_fixture() if fixture is None else fixture
    want = [(r["name"], r["shape"], int(r["count"])) for r in csv.DictReader(io.StringIO(fixture))]
    got = [(n, s, c) for n, s, c, _ in report.rows(collapse=True)] + [("Total", "-", report.total)]
    diffs = []
    for i in range(max(len(want), len(got))):
        w = want[i] if i < len(want) else None
        g = got[i] if i < len(got) else None
        if w != g:
            diffs.append(f"row {i + 1}: expected {w}, got {g}")
    return diffs
