"""Adjoint-versus-finite-difference gradient checks.

Both checks use central differences with step ``delta`` and report the worst
``max_relative_error`` over every parameter (and, for the isolated circuit,
the projector input too).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ReplacementStrategy, Transformer
from .ops import log_softmax
from .qproj import (ProjectorConfig, QuantumProjector, max_relative_error, quantum_grad_adjoint,
                    quantum_grad_fd)


@dataclass
class GradReport:
    worst: float
    per_tensor: dict

    def lines(self) -> list[str]:
        return [f"{k:<40} {v:.3e}" for k, v in self.per_tensor.items()]


def central_fd(loss_fn, arr: np.ndarray, delta: float) -> np.ndarray:
    """Numerical gradient of ``loss_fn()`` w.r.t. ``arr``, perturbed in place."""
    out = np.zeros_like(arr)
    for i in range(arr.size):
        orig = arr.flat[i]
        arr.flat[i] = orig + delta
        up = loss_fn()
        arr.flat[i] = orig - delta
        down = loss_fn()
        arr.flat[i] = orig
        out.flat[i] = (up - down) / (2 * delta)
    return out


def circuit_gradcheck(n_q: int = 4, seed: int = 0, n_layers: int = 2, variant: str = "B150M",
                      expand_mode: str = "full", delta: float = 1e-4, d_in: int = 6, d_out: int = 5,
                      rtol_floor: float = 1e-3) -> GradReport:
    """One projector under the loss sum(Y * R) for a random R."""
    rng = np.random.default_rng(seed)
    cfg = ProjectorConfig(n_q=n_q, n_layers=n_layers, variant=variant, expand_mode=expand_mode)
    proj = QuantumProjector(d_in, d_out, cfg, rng)
    X = rng.normal(size=(2, 3, d_in))
    R = rng.normal(size=(2, 3, d_out))

    def loss():
        return float(np.sum(proj.forward(X) * R))

    proj.forward(X)
    adj = quantum_grad_adjoint(proj, R)
    errs = {}
    theta = proj.params["mq_layers.0.weight"]
    saved = theta.copy()

    def theta_loss(probe):
        theta[...] = probe
        return loss()

    fd_theta = quantum_grad_fd(theta_loss, saved, delta)
    theta[...] = saved
    errs["mq_layers.0.weight"] = max_relative_error(adj["mq_layers.0.weight"], fd_theta, rtol_floor)
    for name, arr in proj.params.items():
        if name != "mq_layers.0.weight":
            errs[name] = max_relative_error(adj[name], central_fd(loss, arr, delta), rtol_floor)
    errs["input"] = max_relative_error(adj["input"], central_fd(loss, X, delta), rtol_floor)
    return GradReport(max(errs.values()), errs)


def toy_config(replace="Wq, FFN_gate", n_q: int = 3, expand_mode: str = "full", per_head: bool = False,
               ffn_type: str = "gated") -> ModelConfig:
    """d_model 16, one layer, vocabulary 11."""
    return ModelConfig(vocab_size=11, hidden_size=16, num_hidden_layers=1, num_attention_heads=4,
                       num_key_value_heads=2, intermediate_size=24, max_position_embeddings=16, seq_len=8,
                       replace=ReplacementStrategy.parse(replace),
                       projector=ProjectorConfig(n_q=n_q, n_layers=2, variant="B150M", expand_mode=expand_mode),
                       per_head=per_head, ffn_type=ffn_type)


def model_gradcheck(cfg: ModelConfig | None = None, seed: int = 0, delta: float = 1e-4,
                    rtol_floor: float = 1e-4, B: int = 2, L: int = 5) -> GradReport:
    """Backpropagation through a whole model against FD of the mean token loss."""
    cfg = cfg or toy_config()
    model = Transformer(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    tokens = rng.integers(0, cfg.vocab_size, (B, L))
    targets = rng.integers(0, cfg.vocab_size, (B, L))

    def loss():
        lp = log_softmax(model.forward(tokens))
        return float(-np.mean(np.take_along_axis(lp, targets[..., None], -1)))

    model.zero_grad()
    lp = log_softmax(model.forward(tokens))
    d = np.exp(lp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], -1) - 1, -1)
    model.backward(d / tokens.size)
    grads = {k: v.copy() for k, v in model.named_grads().items()}
    errs = {}
    for name, arr in model.named_parameters().items():
        errs[name] = max_relative_error(grads[name], central_fd(loss, arr, delta), rtol_floor)
    return GradReport(max(errs.values()), errs)
