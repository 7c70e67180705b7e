"""Hybrid quantum projection layer.

A QuantumProjector stands in for a dense layer ``d_in -> d_out``:

    X --affine+tanh--> 2*n_q features --pi*sigmoid--> (theta_j, phi_j)
      --> prod_j RZ(phi_j) RY(theta_j) H |0>     (product state)
      --> N_L ansatz layers                      (trainable angles)
      --> <Z_j> for every qubit
      --> affine (+ optional mean over qubits) --> GELU --> d_out

Every token is an independent circuit instance. Rows are simulated in fixed
size chunks so that results and gradient reductions are bit-identical for
any worker count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import qsim
from .errors import ConfigError, NumericalError, UsageError
from .ops import gelu, gelu_grad, sigmoid

VARIANTS = ("A8M", "B150M", "Custom")
EXPAND_MODES = ("scalar", "full")
FD_DELTA_RANGE = (1e-4, 1e-3)
ROW_CHUNK = 256


# ----------------------------------------------------------------------------
# ansatz description
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Slot:
    """One ansatz gate. ``param`` indexes the flat trainable vector (None for CNOT)."""

    kind: str
    target: int
    control: int | None = None
    param: int | None = None


def ring_pairs(n_q: int) -> tuple[tuple[int, int], ...]:
    """(control, target) pairs of the closed CNOT ring 0->1->...->n_q-1->0."""
    if n_q == 1:
        return ()
    return tuple((j, (j + 1) % n_q) for j in range(n_q))


@dataclass(frozen=True)
class AnsatzDescriptor:
    variant: str
    n_q: int
    n_layers: int
    layer_template: tuple[Slot, ...]
    entangler: tuple[tuple[int, int], ...]
    params_per_layer: int
    slots: tuple[Slot, ...] = field(repr=False)

    @property
    def n_params(self) -> int:
        return self.params_per_layer * self.n_layers

    @property
    def rotation_count(self) -> int:
        return sum(s.kind != "CNOT" for s in self.slots)

    @property
    def cnot_count(self) -> int:
        return sum(s.kind == "CNOT" for s in self.slots)

    @property
    def gate_count(self) -> int:
        return len(self.slots)

    def gates(self, theta) -> list[qsim.Gate]:
        theta = _check_theta(self, theta)
        out = []
        for s in self.slots:
            if s.kind == "CNOT":
                out.append(qsim.Gate("CNOT", s.target, control=s.control))
            else:
                out.append(qsim.Gate(s.kind, s.target, angle=float(theta[s.param])))
        return out

    def encoding_gates(self, enc_theta, enc_phi) -> list[qsim.Gate]:
        out = []
        for j in range(self.n_q):
            out += [
                qsim.Gate("H", j),
                qsim.Gate("RY", j, angle=float(enc_theta[j])),
                qsim.Gate("RZ", j, angle=float(enc_phi[j])),
            ]
        return out


def _layer_b(n_q: int) -> list[Slot]:
    # operator RZ(alpha) RY(beta) RZ(gamma): gamma acts first in time.
    # parameter layout per qubit: [alpha, beta, gamma]
    slots = []
    for j in range(n_q):
        slots += [
            Slot("RZ", j, param=3 * j + 2),
            Slot("RY", j, param=3 * j + 1),
            Slot("RZ", j, param=3 * j),
        ]
    slots += [Slot("CNOT", t, control=c) for c, t in ring_pairs(n_q)]
    return slots


def _layer_a(n_q: int) -> list[Slot]:
    # brick pattern: CNOT on (0,1),(2,3)..., RY column, CNOT on (1,2),(3,4)..., RZ column
    slots = [Slot("CNOT", j + 1, control=j) for j in range(0, n_q - 1, 2)]
    slots += [Slot("RY", j, param=j) for j in range(n_q)]
    slots += [Slot("CNOT", j + 1, control=j) for j in range(1, n_q - 1, 2)]
    slots += [Slot("RZ", j, param=n_q + j) for j in range(n_q)]
    return slots


def _layer_custom(n_q: int, rotations: tuple[str, ...], entangler: str) -> list[Slot]:
    slots = []
    k = 0
    for j in range(n_q):
        for kind in rotations:
            if kind not in ("RY", "RZ"):
                raise ConfigError(f"ansatz rotations must be RY or RZ, got {kind!r}")
            slots.append(Slot(kind, j, param=k))
            k += 1
    if entangler == "ring":
        pairs = ring_pairs(n_q)
    elif entangler == "chain":
        pairs = tuple((j, j + 1) for j in range(n_q - 1))
    elif entangler == "none":
        pairs = ()
    else:
        raise ConfigError(f"unknown entangler {entangler!r}")
    slots += [Slot("CNOT", t, control=c) for c, t in pairs]
    return slots


def build_ansatz(
    variant: str = "B150M",
    n_q: int = 10,
    n_layers: int = 2,
    rotations: tuple[str, ...] = ("RZ", "RY", "RZ"),
    entangler: str = "ring",
) -> AnsatzDescriptor:
    """Build an ansatz descriptor. ``rotations``/``entangler`` apply to Custom only."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    qsim._check_n_q(n_q)
    if not isinstance(n_layers, (int, np.integer)) or n_layers < 1:
        raise ConfigError(f"n_layers must be a positive integer, got {n_layers!r}")
    if variant == "B150M":
        template = _layer_b(n_q)
    elif variant == "A8M":
        template = _layer_a(n_q)
    else:
        template = _layer_custom(n_q, tuple(rotations), entangler)
    per_layer = sum(s.param is not None for s in template)
    slots = []
    for layer in range(n_layers):
        off = layer * per_layer
        for s in template:
            p = None if s.param is None else s.param + off
            slots.append(Slot(s.kind, s.target, s.control, p))
    desc = AnsatzDescriptor(
        variant=variant,
        n_q=n_q,
        n_layers=n_layers,
        layer_template=tuple(template),
        entangler=tuple((s.control, s.target) for s in template if s.kind == "CNOT"),
        params_per_layer=per_layer,
        slots=tuple(slots),
    )
    if variant == "B150M":
        assert desc.n_params == 3 * n_q * n_layers
        assert desc.cnot_count == len(ring_pairs(n_q)) * n_layers
    elif variant == "A8M":
        assert desc.n_params == 2 * n_q * n_layers
    return desc


def _check_theta(ansatz: AnsatzDescriptor, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (ansatz.n_params,):
        raise UsageError(
            f"ansatz expects {ansatz.n_params} parameters, got shape {theta.shape}"
        )
    return theta


# ----------------------------------------------------------------------------
# pipeline stages
# ----------------------------------------------------------------------------

def compress(X: np.ndarray, W_down: np.ndarray, b_down: np.ndarray) -> np.ndarray:
    """tanh(X W_down + b_down), with W_down shaped (d_in, 2 n_q)."""
    X = np.asarray(X, dtype=np.float64)
    if W_down.ndim != 2 or X.shape[-1] != W_down.shape[0] or b_down.shape != (W_down.shape[1],):
        raise UsageError(
            f"compress shape mismatch: X {X.shape}, W_down {W_down.shape}, b_down {b_down.shape}"
        )
    if W_down.shape[1] % 2:
        raise UsageError("compressed width must be 2*n_q (even)")
    return np.tanh(X @ W_down + b_down)


def flatten_batch(X: np.ndarray) -> np.ndarray:
    """(B, L, d) -> (B*L, d); row i is token (i // L, i % L)."""
    X = np.asarray(X)
    if X.ndim != 3:
        raise UsageError(f"flatten_batch expects a rank-3 tensor, got shape {X.shape}")
    B, L, d = X.shape
    return X.reshape(B * L, d)


def unflatten_batch(M: np.ndarray, B: int, L: int) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != B * L:
        raise UsageError(f"cannot unflatten {M.shape} into B={B}, L={L}")
    return M.reshape(B, L, M.shape[1])


def encode_angles(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split the last axis (2*n_q wide) into (theta, phi) = pi * sigmoid(x)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise UsageError(f"encoding input width must be even, got {x.shape[-1]}")
    n_q = x.shape[-1] // 2
    ang = np.pi * sigmoid(x)
    return ang[..., :n_q], ang[..., n_q:]


def encoded_states(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Batched product states prod_j RZ(phi_j) RY(theta_j) H|0>, shape (N, 2**n_q)."""
    theta = np.atleast_2d(theta)
    phi = np.atleast_2d(phi)
    n, n_q = theta.shape
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    # RY(t) H|0> = [(c - s), (c + s)] / sqrt(2), then RZ phases
    q0 = (c - s) * qsim._SQRT2_INV * np.exp(-0.5j * phi)
    q1 = (c + s) * qsim._SQRT2_INV * np.exp(0.5j * phi)
    state = np.stack((q0[:, 0], q1[:, 0]), axis=1)
    for j in range(1, n_q):
        # qubit j becomes the new most-significant bit
        state = np.concatenate((q0[:, j, None] * state, q1[:, j, None] * state), axis=1)
    return state


def build_encoded_state(theta, phi, n_q: int) -> qsim.StateVector:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if theta.shape != (n_q,) or phi.shape != (n_q,):
        raise UsageError(
            f"need {n_q} angles each, got theta {theta.shape} and phi {phi.shape}"
        )
    qsim._check_n_q(n_q)
    return qsim.StateVector(n_q, encoded_states(theta[None], phi[None])[0])


def ansatz_forward(amps: np.ndarray, ansatz: AnsatzDescriptor, theta: np.ndarray) -> np.ndarray:
    n_q = ansatz.n_q
    for s in ansatz.slots:
        if s.kind == "RY":
            amps = qsim.apply_ry(amps, n_q, s.target, theta[s.param])
        elif s.kind == "RZ":
            amps = qsim.apply_rz(amps, n_q, s.target, theta[s.param])
        else:
            amps = qsim.apply_cnot(amps, n_q, s.control, s.target)
    return amps


def apply_ansatz(state: qsim.StateVector, ansatz: AnsatzDescriptor, theta) -> qsim.StateVector:
    theta = _check_theta(ansatz, theta)
    if state.n_q != ansatz.n_q:
        raise UsageError(f"state has {state.n_q} qubits, ansatz {ansatz.n_q}")
    return qsim.StateVector(state.n_q, ansatz_forward(state.amps[None], ansatz, theta)[0])


def _grad_ry(lam: np.ndarray, psi: np.ndarray, n_q: int, q: int) -> np.ndarray:
    # Im <lam| Y_q |psi> per row
    l0, l1 = qsim._split(lam, n_q, q)
    p0, p1 = qsim._split(psi, n_q, q)
    w = np.conj(l1) * p0 - np.conj(l0) * p1
    return np.sum(w.real.reshape(w.shape[0], -1), axis=1)


def _grad_rz(lam: np.ndarray, psi: np.ndarray, n_q: int, q: int) -> np.ndarray:
    # Im <lam| Z_q |psi> per row
    l0, l1 = qsim._split(lam, n_q, q)
    p0, p1 = qsim._split(psi, n_q, q)
    w = np.conj(l0) * p0 - np.conj(l1) * p1
    return np.sum(w.imag.reshape(w.shape[0], -1), axis=1)


def circuit_adjoint(
    psi: np.ndarray,
    g_m: np.ndarray,
    ansatz: AnsatzDescriptor,
    theta: np.ndarray,
    enc_theta: np.ndarray,
    enc_phi: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse-mode sweep for the scalar sum_i g_m[i] . <Z>(psi_i).

    ``psi`` holds the final states (N, 2**n_q). Returns the gradient with
    respect to the shared ansatz angles (summed over rows) and the per-row
    gradients with respect to the encoding angles.
    """
    n_q = ansatz.n_q
    lam = psi * (g_m @ qsim.z_signs(n_q))
    g_theta = np.zeros(ansatz.n_params)
    for s in reversed(ansatz.slots):
        if s.kind == "CNOT":
            psi = qsim.apply_cnot(psi, n_q, s.control, s.target)
            lam = qsim.apply_cnot(lam, n_q, s.control, s.target)
            continue
        a = theta[s.param]
        if s.kind == "RY":
            g_theta[s.param] += np.sum(_grad_ry(lam, psi, n_q, s.target))
            psi = qsim.apply_ry(psi, n_q, s.target, -a)
            lam = qsim.apply_ry(lam, n_q, s.target, -a)
        else:
            g_theta[s.param] += np.sum(_grad_rz(lam, psi, n_q, s.target))
            psi = qsim.apply_rz(psi, n_q, s.target, -a)
            lam = qsim.apply_rz(lam, n_q, s.target, -a)
    # encoding: gates on different qubits commute, so each RZ_j (then RY_j)
    # can be treated as the last gate in turn
    g_phi = np.empty_like(enc_phi)
    g_th = np.empty_like(enc_theta)
    for j in range(n_q):
        g_phi[:, j] = _grad_rz(lam, psi, n_q, j)
    for j in range(n_q):
        psi = qsim.apply_rz(psi, n_q, j, -enc_phi[:, j])
        lam = qsim.apply_rz(lam, n_q, j, -enc_phi[:, j])
    for j in range(n_q):
        g_th[:, j] = _grad_ry(lam, psi, n_q, j)
    return g_theta, g_th, g_phi


# ----------------------------------------------------------------------------
# expansion
# ----------------------------------------------------------------------------

def expand(M: np.ndarray, W_up: np.ndarray, b_up: np.ndarray, mode: str = "scalar") -> np.ndarray:
    """GELU(M W_up + b_up) (full, W_up (n_q, d_out)) or
    GELU(mean_j(M) W_up + b_up) (scalar, W_up (1, d_out))."""
    M = np.asarray(M, dtype=np.float64)
    if mode == "full":
        if W_up.shape[0] != M.shape[-1]:
            raise UsageError(f"full expansion needs W_up ({M.shape[-1]}, d_out), got {W_up.shape}")
        z = M
    elif mode == "scalar":
        if W_up.shape[0] != 1:
            raise UsageError(f"scalar expansion needs W_up (1, d_out), got {W_up.shape}")
        z = M.mean(axis=-1, keepdims=True)
    else:
        raise UsageError(f"expand mode must be one of {EXPAND_MODES}, got {mode!r}")
    if b_up.shape != (W_up.shape[1],):
        raise UsageError(f"b_up shape {b_up.shape} does not match W_up {W_up.shape}")
    return gelu(z @ W_up + b_up)


# ----------------------------------------------------------------------------
# the module
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ProjectorConfig:
    n_q: int = 10
    n_layers: int = 2
    variant: str = "B150M"
    expand_mode: str = "scalar"

    def __post_init__(self):
        if self.expand_mode not in EXPAND_MODES:
            raise ConfigError(f"expand_mode must be one of {EXPAND_MODES}, got {self.expand_mode!r}")
        if self.variant not in ("A8M", "B150M"):
            raise ConfigError(f"projector variant must be A8M or B150M, got {self.variant!r}")
        qsim._check_n_q(self.n_q)
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be positive, got {self.n_layers}")

    def ansatz(self) -> AnsatzDescriptor:
        return build_ansatz(self.variant, self.n_q, self.n_layers)

    def param_shapes(self, d_in: int, d_out: int) -> dict[str, tuple[int, ...]]:
        """Parameter names and (out, in)-style shapes, in registration order."""
        k = 1 if self.expand_mode == "scalar" else self.n_q
        return {
            "reduce_proj.weight": (2 * self.n_q, d_in),
            "reduce_proj.bias": (2 * self.n_q,),
            "mq_layers.0.weight": (self.ansatz().n_params,),
            "dense_expand.weight": (d_out, k),
            "dense_expand.bias": (d_out,),
        }


def worker_count() -> int:
    raw = os.environ.get("HYQUT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"HYQUT_THREADS must be an integer, got {raw!r}") from None


class QuantumProjector:
    """Drop-in replacement for a dense ``d_in -> d_out`` layer.

    Weights use the (out, in) layout: ``reduce_proj.weight`` is (2 n_q, d_in)
    and ``dense_expand.weight`` is (d_out, 1) in scalar mode or (d_out, n_q)
    in full mode.
    """

    def __init__(self, d_in: int, d_out: int, cfg: ProjectorConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg or ProjectorConfig()
        self.d_in, self.d_out = d_in, d_out
        self.n_q = self.cfg.n_q
        self.expand_mode = self.cfg.expand_mode
        self.ansatz = self.cfg.ansatz()
        rng = rng if rng is not None else np.random.default_rng(0)
        shapes = self.cfg.param_shapes(d_in, d_out)
        k = shapes["dense_expand.weight"][1]
        lim_down, lim_up = 1 / np.sqrt(d_in), 1 / np.sqrt(k)
        self.params = {
            "reduce_proj.weight": rng.uniform(-lim_down, lim_down, shapes["reduce_proj.weight"]),
            "reduce_proj.bias": np.zeros(shapes["reduce_proj.bias"]),
            "mq_layers.0.weight": rng.uniform(0, 2 * np.pi, shapes["mq_layers.0.weight"]),
            "dense_expand.weight": rng.uniform(-lim_up, lim_up, shapes["dense_expand.weight"]),
            "dense_expand.bias": np.zeros(shapes["dense_expand.bias"]),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.cache = None

    @property
    def theta(self) -> np.ndarray:
        return self.params["mq_layers.0.weight"]

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    # -- circuit stage ---------------------------------------------------

    def _run_rows(self, theta_enc: np.ndarray, phi_enc: np.ndarray) -> np.ndarray:
        chunks = range(0, theta_enc.shape[0], ROW_CHUNK)
        theta = self.theta

        def run(i):
            psi = encoded_states(theta_enc[i:i + ROW_CHUNK], phi_enc[i:i + ROW_CHUNK])
            return ansatz_forward(psi, self.ansatz, theta)

        workers = worker_count()
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(i) for i in chunks]
        return np.concatenate(parts, axis=0)

    def circuit_forward(self, x_flat: np.ndarray):
        """(N, 2 n_q) compressed features -> (N, n_q) expectations and final states."""
        theta_enc, phi_enc = encode_angles(x_flat)
        psi = self._run_rows(theta_enc, phi_enc)
        return qsim.measure_z_batch(psi, self.n_q), psi, theta_enc, phi_enc

    # -- full module -----------------------------------------------------

    def forward(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[-1] != self.d_in:
            raise UsageError(f"projector expects (B, L, {self.d_in}), got {X.shape}")
        B, L, _ = X.shape
        p = self.params
        c = compress(X, p["reduce_proj.weight"].T, p["reduce_proj.bias"])
        flat = flatten_batch(c)
        m_flat, psi, th, ph = self.circuit_forward(flat)
        M = unflatten_batch(m_flat, B, L)
        z = M if self.expand_mode == "full" else M.mean(axis=-1, keepdims=True)
        u = z @ p["dense_expand.weight"].T + p["dense_expand.bias"]
        self.cache = dict(X=X, c=c, flat=flat, psi=psi, th=th, ph=ph, z=z, u=u)
        return gelu(u)

    __call__ = forward

    def backward(self, dY: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients into ``self.grads``; return dL/dX."""
        if self.cache is None:
            raise UsageError("backward called before forward")
        cch = self.cache
        p = self.params
        B, L, _ = cch["X"].shape
        du = dY * gelu_grad(cch["u"])
        du2 = du.reshape(B * L, self.d_out)
        z2 = cch["z"].reshape(B * L, -1)
        self.grads["dense_expand.weight"] += du2.T @ z2
        self.grads["dense_expand.bias"] += du2.sum(axis=0)
        dz = du2 @ p["dense_expand.weight"]
        if self.expand_mode == "scalar":
            dm = np.repeat(dz / self.n_q, self.n_q, axis=1)
        else:
            dm = dz
        g_theta, g_th, g_ph = self._adjoint_rows(cch["psi"], dm, cch["th"], cch["ph"])
        self.grads["mq_layers.0.weight"] += g_theta
        cch["angle_grad"] = np.concatenate((g_th, g_ph), axis=1)
        # angle = pi * sigmoid(x): d angle / dx = angle * (1 - angle/pi)
        ang = np.concatenate((cch["th"], cch["ph"]), axis=1)
        dx_flat = cch["angle_grad"] * ang * (1 - ang / np.pi)
        dpre = dx_flat * (1 - cch["flat"] ** 2)
        Xf = cch["X"].reshape(B * L, self.d_in)
        self.grads["reduce_proj.weight"] += dpre.T @ Xf
        self.grads["reduce_proj.bias"] += dpre.sum(axis=0)
        return (dpre @ p["reduce_proj.weight"]).reshape(B, L, self.d_in)

    def _adjoint_rows(self, psi, dm, th, ph):
        chunks = range(0, psi.shape[0], ROW_CHUNK)
        theta = self.theta

        def run(i):
            sl = slice(i, i + ROW_CHUNK)
            return circuit_adjoint(psi[sl], dm[sl], self.ansatz, theta, th[sl], ph[sl])

        workers = worker_count()
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(i) for i in chunks]
        g_theta = np.zeros(self.ansatz.n_params)
        for part in parts:  # fixed chunk order
            g_theta += part[0]
        return (
            g_theta,
            np.concatenate([q[1] for q in parts], axis=0),
            np.concatenate([q[2] for q in parts], axis=0),
        )


def projector_forward(X: np.ndarray, p: QuantumProjector) -> np.ndarray:
    return p.forward(X)


def quantum_grad_adjoint(p: QuantumProjector, dY: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of sum(dY * Y) for the cached forward pass.

    Returns the projector's parameter gradients plus ``"input"``
    (dL/dX) and ``"angles"`` (dL/d(theta_enc, phi_enc), shape (B*L, 2 n_q)).
    """
    if p.cache is None:
        raise UsageError("no cached forward pass; call projector_forward first")
    saved = {k: v.copy() for k, v in p.grads.items()}
    p.zero_grad()
    dX = p.backward(dY)
    out = {k: v.copy() for k, v in p.grads.items()}
    for k, v in saved.items():
        p.grads[k][...] = v
    out["input"] = dX
    out["angles"] = p.cache["angle_grad"]
    return out


class EvalCounter:
    def __init__(self):
        self.count = 0


def quantum_grad_fd(
    loss_fn: Callable[[np.ndarray], float],
    theta: np.ndarray,
    delta: float = 1e-4,
    counter: EvalCounter | None = None,
) -> np.ndarray:
    """Central finite differences (L(t_j + d) - L(t_j - d)) / 2d, one
    component at a time: exactly 2 * len(theta) evaluations of ``loss_fn``."""
    lo, hi = FD_DELTA_RANGE
    if not lo <= delta <= hi:
        raise UsageError(f"fd delta must lie in [{lo:g}, {hi:g}], got {delta!r}")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for j in range(theta.size):
        vals = []
        for sign in (1.0, -1.0):
            probe = theta.copy()
            probe.flat[j] += sign * delta
            val = float(loss_fn(probe))
            if counter is not None:
                counter.count += 1
            if not np.isfinite(val):
                raise NumericalError(f"non-finite loss {val} while perturbing theta[{j}]")
            vals.append(val)
        grad.flat[j] = (vals[0] - vals[1]) / (2 * delta)
    return grad


def max_relative_error(a, b, rtol_floor: float = 1e-3) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).

    The floor turns the check absolute for components near zero; with the
    default, a tolerance of 1e-5 corresponds to an absolute floor of 1e-8.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), rtol_floor)
    return float(np.max(np.abs(a - b) / denom))
