"""Training loop: cross-entropy objective, Adam, warmup + cosine restarts,
loss logging and versioned checkpoints."""
from __future__ import annotations

import csv
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, TrainConfig, config_diff, dump_config, parse_config
from .errors import CheckpointError, ConfigError, NumericalError, UsageError
from .model import Transformer
from .ops import log_softmax
from .qproj import EvalCounter, quantum_grad_fd

THETA_KEY = "mq_layers.0.weight"


def cross_entropy(logits, targets, mask=None) -> float:
    """Mean negative log-likelihood over token positions (masked positions skipped)."""
    loss, _ = cross_entropy_with_grad(logits, targets, mask, need_grad=False)
    return loss


def cross_entropy_with_grad(logits, targets, mask=None, need_grad=True):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise UsageError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise UsageError(f"target index out of range for vocabulary of {V}")
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    n = w.sum()
    if n == 0:
        raise UsageError("no unmasked target positions")
    lp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * w).sum() / n)
    if not need_grad:
        return loss, None
    grad = np.exp(lp)
    np.put_along_axis(grad, targets[..., None],
                      np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    grad *= (w / n)[..., None]
    return loss, grad


def cosine_lr(t_cur: float, t_max: float, eta_max: float, eta_min: float) -> float:
    return eta_min + 0.5 * (eta_max - eta_min) * (1 + math.cos(math.pi * t_cur / t_max))


def lr_at_step(t: int, cfg: TrainConfig) -> float:
    """Linear warmup to eta_max, then cosine annealing with warm restarts.

    Each cycle covers T_cur = 1..cycle_steps, so its last step sits at
    eta_min and the next one restarts just below eta_max.
    """
    if t < 0:
        raise UsageError("step must be >= 0")
    if t <= cfg.warmup_steps:
        return cfg.eta_max * t / cfg.warmup_steps if cfg.warmup_steps else cfg.eta_max
    t_cur = (t - cfg.warmup_steps - 1) % cfg.cycle_steps + 1
    return cosine_lr(t_cur, cfg.cycle_steps, cfg.eta_max, cfg.eta_min)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite gradients in {bad} at optimizer step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


class Trainer:
    """Owns a model, its optimizer state and the step counter."""

    def __init__(self, model: Transformer, run: RunConfig):
        self.model = model
        self.run = run
        self.cfg = run.train
        self.params = model.named_parameters()
        self.grads = model.named_grads()
        self.opt = AdamState.for_params(self.params)
        self.step = 0
        self.fd_counter = EvalCounter()

    def _dropout_rng(self, step):
        return np.random.default_rng([self.cfg.seed, step, 1])

    def batch_loss(self, tokens, targets, mask, step) -> float:
        logits = self.model.forward(tokens, train=True, dropout=self.cfg.dropout,
                                    rng=self._dropout_rng(step))
        return cross_entropy(logits, targets, mask)

    def compute_gradients(self, tokens, targets, mask, step) -> float:
        model = self.model
        logits = model.forward(tokens, train=True, dropout=self.cfg.dropout,
                               rng=self._dropout_rng(step))
        loss, dlogits = cross_entropy_with_grad(logits, targets, mask)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} at step {step}")
        model.zero_grad()
        model.backward(dlogits)
        if self.cfg.grad_mode == "fd":
            self._fd_quantum_grads(tokens, targets, mask, step)
        return loss

    def _fd_quantum_grads(self, tokens, targets, mask, step):
        for prefix, proj in self.model.projectors().items():
            theta = proj.params[THETA_KEY]
            saved = theta.copy()

            def loss_fn(probe):
                theta[...] = probe
                return self.batch_loss(tokens, targets, mask, step)

            try:
                g = quantum_grad_fd(loss_fn, saved, self.cfg.fd_delta, self.fd_counter)
            except NumericalError as exc:
                raise NumericalError(f"{prefix}{THETA_KEY}: {exc}") from None
            finally:
                theta[...] = saved
            proj.grads[THETA_KEY][...] = g

    def train_step(self, tokens, targets, mask=None) -> tuple[float, float]:
        """One optimisation step; returns (loss before the update, lr used)."""
        step = self.step + 1
        if mask is None:
            mask = np.ones(targets.shape, dtype=bool)
        loss = self.compute_gradients(tokens, targets, mask, step)
        if self.cfg.clip_norm > 0:
            clip_grad_norm(self.grads, self.cfg.clip_norm)
        lr = lr_at_step(step, self.cfg)
        adam_step(self.params, self.grads, self.opt, lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps)
        self.step = step
        return loss, lr


def train_step(model, batch, trainer: Trainer, cfg: TrainConfig | None = None):
    """Functional wrapper: ``batch`` is (tokens, targets[, mask])."""
    if trainer.model is not model:
        raise UsageError("trainer is bound to a different model")
    return trainer.train_step(*batch)


class LossLog:
    """CSV ``step,lr,loss,tokens_per_sec``, flushed after every row."""

    HEADER = ("step", "lr", "loss", "tokens_per_sec")

    def __init__(self, path, append=False):
        self.path = Path(path)
        new = not (append and self.path.exists())
        self._fh = open(self.path, "a" if not new else "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh)
        if new:
            self._w.writerow(self.HEADER)
            self._fh.flush()

    def write(self, step, lr, loss, tokens_per_sec):
        self._w.writerow([step, repr(float(lr)), repr(float(loss)), f"{tokens_per_sec:.1f}"])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_training(trainer: Trainer, stream, until: int, log: LossLog | None = None, on_step=None):
    """Advance ``trainer`` to step ``until`` pulling batch k = step - 1 from ``stream``."""
    losses = []
    while trainer.step < until:
        tokens, targets, mask = stream.batch(trainer.step)
        t0 = time.perf_counter()
        loss, lr = trainer.train_step(tokens, targets, mask)
        dt = time.perf_counter() - t0
        losses.append(loss)
        if log is not None:
            log.write(trainer.step, lr, loss, tokens.size / max(dt, 1e-9))
        if on_step is not None:
            on_step(trainer.step, loss, lr)
    return losses


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

MAGIC = b"HYQUTCKP"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f32": 0, "f64": 1}


@dataclass
class Checkpoint:
    config_text: str
    step: int
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int


def save_checkpoint(model: Transformer, trainer: Trainer, step: int, path, config_text: str | None = None,
                    precision: str = "f64") -> None:
    """Write magic, version, config text, counters, then named tensors and a CRC32.

    ``precision="f32"`` stores 32-bit floats (smaller, not bit-exact for
    resumption).
    """
    if precision not in _CODES:
        raise UsageError(f"precision must be one of {sorted(_CODES)}")
    code = _CODES[precision]
    config_text = dump_config(trainer.run) if config_text is None else config_text
    cfg_bytes = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes,
             struct.pack("<QQ", step, trainer.opt.t)]
    tensors = []
    for group, source in (("param", model.named_parameters()), ("adam_m", trainer.opt.m), ("adam_v", trainer.opt.v)):
        for name, arr in source.items():
            tensors.append((f"{group}/{name}", arr))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    try:
        Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from None


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    try:
        off = len(MAGIC) + 4
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        config_text = body[off:off + n].decode("utf-8")
        off += n
        step, adam_t = struct.unpack_from("<QQ", body, off)
        off += 16
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        groups = {"param": {}, "adam_m": {}, "adam_v": {}}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape)
            off += size
            group, key = name.split("/", 1)
            groups[group][key] = arr.astype(np.float64)
        if off != len(body):
            raise ValueError("trailing bytes")
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return Checkpoint(config_text, step, groups["param"], groups["adam_m"], groups["adam_v"], adam_t)


def restore(ckpt: Checkpoint, trainer: Trainer) -> None:
    """Load a checkpoint into ``trainer`` after checking config and tensor agreement."""
    saved = parse_config(ckpt.config_text)
    diff = config_diff(saved, trainer.run)
    if diff:
        raise ConfigError("checkpoint config disagrees with current config:\n  " + "\n  ".join(diff))
    for group, target in (("param", trainer.params), ("adam_m", trainer.opt.m), ("adam_v", trainer.opt.v)):
        source = getattr(ckpt, "params" if group == "param" else group)
        if set(source) != set(target):
            missing = sorted(set(target) ^ set(source))
            raise CheckpointError(f"checkpoint tensors do not match the model: {missing[:5]}")
        for k, arr in source.items():
            if arr.shape != target[k].shape:
                raise CheckpointError(f"{group}/{k}: shape {arr.shape} != {target[k].shape}")
            target[k][...] = arr
    trainer.opt.t = ckpt.adam_t
    trainer.step = ckpt.step
