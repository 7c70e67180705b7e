"""Command-line entry point: ``hyqut <command> [options]``.

Exit codes: 0 success, 1 a check failed (golden diff, gradcheck tolerance),
2 usage or config error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import accounting
from .config import (RunConfig, config_needs_vocab, config_value, dump_config, load_config, parse_config,
                     with_overrides)
from .data import BOS, BatchStream, Tokenizer, build_vocab, ingest, repetitive_corpus
from .errors import DataError, HyqutError, UsageError
from .gradcheck import circuit_gradcheck, model_gradcheck
from .model import ABLATION_STRATEGIES, ReplacementStrategy, Transformer, generate
from .qproj import EXPAND_MODES
from .train import LossLog, Trainer, load_checkpoint, restore, run_training, save_checkpoint

SHIPPED = ("classic8m.cfg", "hyqut8m.cfg", "classic150m.cfg", "hyqut150m.cfg", "toy.cfg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def resolve_config(path: str) -> Path:
    """A filesystem path, or the name of a config shipped with the package."""
    p = Path(path)
    if p.exists() or p.name not in SHIPPED or len(p.parts) > 1:
        return p
    return Path(str(resources.files("hyqut").joinpath("configs", p.name)))


def _apply_flags(run: RunConfig, args, path: Path) -> RunConfig:
    proj, model, train = {}, {}, {}
    if getattr(args, "variant", None):
        proj["variant"] = args.variant
    if getattr(args, "expand_mode", None):
        proj["expand_mode"] = args.expand_mode
    if getattr(args, "replace", None) is not None:
        model["replace"] = ReplacementStrategy.parse(args.replace)
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        train["total_steps"] = args.steps
        # schedule lengths not pinned in the file follow the new total
        for key in ("warmup_steps", "cycle_steps"):
            raw = config_value(path, "train", key)
            train[key] = int(raw) if raw else None
    if getattr(args, "grad_mode", None):
        train["grad_mode"] = args.grad_mode
    if getattr(args, "delta", None) is not None:
        train["fd_delta"] = args.delta
    try:
        return with_overrides(run, model=model, projector=proj, train=train)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _static_config(args) -> RunConfig:
    """Config for commands that never see a corpus (``vocab_size = auto`` needs --vocab-size)."""
    path = resolve_config(args.config)
    vocab = args.vocab_size
    if vocab is None and config_needs_vocab(path):
        raise UsageError("[model] vocab_size is 'auto'; pass --vocab-size")
    return _apply_flags(load_config(path, vocab), args, path)


def _corpus(args, config_path: Path, out: Path):
    path = args.corpus or config_value(config_path, "train", "corpus")
    if not path:
        path = out / "corpus.txt"
        if not path.exists():
            path.write_text(repetitive_corpus(seed=0), encoding="utf-8")
    corpus = ingest(path)
    return corpus, build_vocab(corpus), str(path)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    out = _out_dir(args.out)
    path = resolve_config(args.config)
    corpus, tok, corpus_path = _corpus(args, path, out)
    run = _apply_flags(load_config(path, tok.vocab_size), args, path)
    run = RunConfig(run.model, replace(run.train, corpus=corpus_path))
    stream = BatchStream(corpus, tok, run.train.batch_size, run.model.seq_len, run.train.seed)
    model = Transformer(run.model, seed=run.train.seed)
    trainer = Trainer(model, run)
    if args.resume:
        restore(load_checkpoint(args.resume), trainer)
    until = run.train.total_steps if args.stop_at is None else min(args.stop_at, run.train.total_steps)
    tok.save(out / "vocab.json")
    (out / "config.cfg").write_text(dump_config(run), encoding="utf-8")
    print(f"corpus {corpus_path}: kept {corpus.kept}, dropped {corpus.dropped}; vocab {tok.vocab_size}")
    print(f"parameters {model.num_parameters():,}; steps {trainer.step + 1}..{until}")
    every = max(1, args.log_every)

    def report(step, loss, lr):
        if step % every == 0 or step == until:
            print(f"step {step:>6}  lr {lr:.3e}  loss {loss:.4f}")

    with LossLog(out / "loss.csv", append=bool(args.resume)) as log:
        run_training(trainer, stream, until, log, on_step=report)
    save_checkpoint(model, trainer, trainer.step, out / "checkpoint.bin", precision=args.precision)
    print(f"checkpoint {out / 'checkpoint.bin'} at step {trainer.step}")
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = parse_config(ckpt.config_text)
    vocab_path = Path(args.vocab) if args.vocab else Path(args.checkpoint).with_name("vocab.json")
    tok = Tokenizer.load(vocab_path)
    if tok.vocab_size != run.model.vocab_size:
        raise UsageError(f"vocabulary {vocab_path} has {tok.vocab_size} entries, model expects "
                         f"{run.model.vocab_size}")
    model = Transformer(run.model)
    params = model.named_parameters()
    for k, v in ckpt.params.items():
        params[k][...] = v
    prompt = [BOS] + tok.encode(args.prompt)
    ids = generate(prompt, model, args.max_new, args.temperature, args.seed)
    print(tok.decode(ids))
    return 0


def cmd_count_params(args) -> int:
    run = _static_config(args)
    report = accounting.count_params(run.model)
    print(report.to_csv(not args.full) if args.csv else report.to_text(not args.full), end="")
    if args.golden is not None:
        fixture = None if args.golden == "" else Path(args.golden).read_text(encoding="utf-8")
        diffs = accounting.golden_diff(report, fixture)
        if diffs:
            print("golden: MISMATCH")
            for d in diffs:
                print("  " + d)
            return 1
        print("golden: match")
    return 0


def cmd_flops(args) -> int:
    run = _static_config(args)
    cfg = run.model
    L = args.seq_len or cfg.seq_len
    fwd = accounting.estimate_flops(cfg, seq_len=L, batch_size=args.batch_size,
                                    include_attention=not args.no_attention)
    print(f"projection MACs per token   {accounting.projection_macs(cfg):,}")
    print(f"forward FLOPs (B={args.batch_size}, L={L})  {fwd:,}")
    print(f"training FLOPs per step     {accounting.training_flops(cfg, seq_len=L, batch_size=args.batch_size):,}")
    print(f"classical computation       {accounting.classical_percentage(cfg):.2f}%")
    return 0


def _smoke_config(run: RunConfig, vocab_size: int, steps: int) -> RunConfig:
    m = replace(run.model, vocab_size=vocab_size, hidden_size=32, num_hidden_layers=1, num_attention_heads=4,
                num_key_value_heads=2, intermediate_size=64, max_position_embeddings=128, seq_len=32,
                projector=replace(run.model.projector, n_q=4))
    t = replace(run.train, batch_size=8, total_steps=steps, warmup_steps=max(1, steps // 20), cycle_steps=None,
                eta_max=0.02, eta_min=0.002)
    return RunConfig(m, t)


def _smoke(run: RunConfig, corpus, tok, steps: int) -> str:
    model = Transformer(run.model, seed=run.train.seed)
    trainer = Trainer(model, run)
    stream = BatchStream(corpus, tok, run.train.batch_size, run.model.seq_len, run.train.seed)
    losses = run_training(trainer, stream, steps)
    head, tail = np.mean(losses[:5]), np.mean(losses[-5:])
    verdict = "converging" if tail <= 0.8 * head else "not converging"
    return f"{verdict} ({head:.3f} -> {tail:.3f})"


def cmd_ablate(args) -> int:
    run = _static_config(args)
    rows = accounting.ablation_table(run.model, seq_len=args.seq_len)
    verdicts = None
    if args.smoke_steps:
        out = _out_dir(args.out)
        corpus, tok, _ = _corpus(args, resolve_config(args.config), out)
        verdicts = {}
        for label, strategy in ABLATION_STRATEGIES:
            smoke = _smoke_config(run, tok.vocab_size, args.smoke_steps)
            smoke = RunConfig(smoke.model.with_replace(strategy), smoke.train)
            verdicts[label] = _smoke(smoke, corpus, tok, args.smoke_steps)
    print(accounting.format_ablation(rows, verdicts), end="")
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for s in range(args.seed, args.seed + args.seeds):
        r = circuit_gradcheck(args.nq, s, args.layers, args.variant or "B150M", args.expand_mode or "full",
                              args.delta)
        worst = max(worst, r.worst)
        if args.verbose:
            print(f"seed {s}: {r.worst:.3e}")
    ok = worst < args.tol
    print(f"circuit (n_q={args.nq}, seeds {args.seed}..{args.seed + args.seeds - 1}): "
          f"max relative error {worst:.3e} {'PASS' if ok else 'FAIL'} (< {args.tol:g})")
    if args.end_to_end:
        r = model_gradcheck(seed=args.seed, delta=args.delta)
        e2e_ok = r.worst < args.e2e_tol
        if args.verbose:
            print("\n".join(r.lines()))
        print(f"end-to-end toy model: max relative error {r.worst:.3e} "
              f"{'PASS' if e2e_ok else 'FAIL'} (< {args.e2e_tol:g})")
        ok = ok and e2e_ok
    return 0 if ok else 1


def cmd_export_loss(args) -> int:
    src = Path(args.csv)
    try:
        with open(src, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {src}: {exc}") from None
    if rows and not {"step", "lr", "loss"} <= set(rows[0]):
        raise DataError(f"{src}: expected columns step, lr, loss")
    every = max(1, args.every)
    lines = [f"{'step':>8} {'lr':>12} {'loss':>10}"]
    for i, r in enumerate(rows):
        if i % every == 0 or i == len(rows) - 1:
            lines.append(f"{int(r['step']):>8} {float(r['lr']):>12.4e} {float(r['loss']):>10.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return 0


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def _model_flags(p, config_required=True):
    p.add_argument("--config", required=config_required, help="config path or shipped name (e.g. hyqut8m.cfg)")
    p.add_argument("--replace", help="comma-separated targets, e.g. 'Wq,FFN_gate' (empty for none)")
    p.add_argument("--expand-mode", choices=EXPAND_MODES)
    p.add_argument("--variant", choices=("A8M", "B150M"))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hyqut", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model, writing loss.csv and a checkpoint")
    _model_flags(p)
    p.add_argument("--corpus", help="UTF-8 text, one sample per line (default: synthetic)")
    p.add_argument("--out", default="run")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="total steps of the schedule")
    p.add_argument("--stop-at", type=int, help="stop (and checkpoint) after this step")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--grad-mode", choices=("adjoint", "fd"))
    p.add_argument("--delta", type=float, help="finite-difference step")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample text from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="vocab.json (default: next to the checkpoint)")
    p.add_argument("--prompt", default="")
    p.add_argument("--max-new", type=int, default=80)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("count-params", help="per-layer parameter table")
    _model_flags(p)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--full", action="store_true", help="list every layer instead of layers.N")
    p.add_argument("--golden", nargs="?", const="", help="diff against a fixture (default: the shipped one)")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("flops", help="FLOPs estimate")
    _model_flags(p)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--no-attention", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("ablate", help="the seven replacement strategies")
    _model_flags(p)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--smoke-steps", type=int, default=0, help="also train a shrunken model per strategy")
    p.add_argument("--corpus")
    p.add_argument("--out", default="run")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="adjoint vs finite-difference gradients")
    p.add_argument("--nq", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--variant", choices=("A8M", "B150M"))
    p.add_argument("--expand-mode", choices=EXPAND_MODES)
    p.add_argument("--delta", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--end-to-end", action="store_true")
    p.add_argument("--e2e-tol", type=float, default=1e-4)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-loss", help="loss.csv to a plain-text table")
    p.add_argument("csv")
    p.add_argument("--every", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_loss)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except HyqutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
