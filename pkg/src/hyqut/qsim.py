"""Statevector simulation for the gate set {H, RY, RZ, CNOT}.

Conventions:
    * qubit 0 is the least-significant bit of the basis-state index, so the
      amplitude of |q_{n-1} ... q_1 q_0> lives at index sum(q_j << j);
    * RY(t) = exp(-i t Y / 2), RZ(t) = exp(-i t Z / 2);
    * amplitudes are complex128 everywhere.

The batched kernels operate on arrays of shape (N, 2**n_q), one row per
independent circuit instance. Every kernel is elementwise per row, so a row's
result does not depend on which other rows share the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, UsageError

MAX_QUBITS = 14
DENSE_MAX_QUBITS = 6
GATE_KINDS = ("H", "RY", "RZ", "CNOT")

_SQRT2_INV = 1.0 / np.sqrt(2.0)
H_MATRIX = np.array([[1, 1], [1, -1]], dtype=np.complex128) * _SQRT2_INV
CNOT_MATRIX = np.array(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=np.complex128
)


def ry_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=np.complex128)


def rz_matrix(phi: float) -> np.ndarray:
    return np.array(
        [[np.exp(-0.5j * phi), 0], [0, np.exp(0.5j * phi)]], dtype=np.complex128
    )


@dataclass(frozen=True)
class Gate:
    kind: str
    target: int
    control: int | None = None
    angle: float | None = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise UsageError(f"unknown gate kind {self.kind!r}")
        if self.kind == "CNOT":
            if self.control is None:
                raise UsageError("CNOT needs a control qubit")
            if self.control == self.target:
                raise UsageError("CNOT control and target must differ")
        elif self.control is not None:
            raise UsageError(f"{self.kind} takes no control qubit")
        if self.kind in ("RY", "RZ") and self.angle is None:
            raise UsageError(f"{self.kind} needs an angle")

    def matrix(self) -> np.ndarray:
        """Local matrix: 2x2, or 4x4 in the (control, target) basis, control as the high bit."""
        if self.kind == "H":
            return H_MATRIX.copy()
        if self.kind == "RY":
            return ry_matrix(self.angle)
        if self.kind == "RZ":
            return rz_matrix(self.angle)
        return CNOT_MATRIX.copy()

    def qubits(self) -> tuple[int, ...]:
        return (self.target,) if self.control is None else (self.control, self.target)


@dataclass
class StateVector:
    n_q: int
    amps: np.ndarray

    def __post_init__(self):
        self.amps = np.asarray(self.amps, dtype=np.complex128)
        if self.amps.shape != (1 << self.n_q,):
            raise UsageError(
                f"expected {1 << self.n_q} amplitudes for {self.n_q} qubits, "
                f"got shape {self.amps.shape}"
            )

    def norm(self) -> float:
        return float(np.sum(np.abs(self.amps) ** 2))


def _check_n_q(n_q: int, ceiling: int = MAX_QUBITS) -> None:
    if not isinstance(n_q, (int, np.integer)) or not 1 <= n_q <= ceiling:
        raise ConfigError(f"qubit count must be in [1, {ceiling}], got {n_q!r}")


def _check_gate(gate: Gate, n_q: int) -> None:
    for q in gate.qubits():
        if not 0 <= q < n_q:
            raise UsageError(f"{gate.kind} qubit index {q} out of range for {n_q} qubits")


def init_ground(n_q: int) -> StateVector:
    _check_n_q(n_q)
    amps = np.zeros(1 << n_q, dtype=np.complex128)
    amps[0] = 1.0
    return StateVector(n_q, amps)


# ----------------------------------------------------------------------------
# batched kernels
# ----------------------------------------------------------------------------

def _split(amps: np.ndarray, n_q: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Views of the bit-q = 0 and bit-q = 1 halves, shaped (N, hi, lo)."""
    view = amps.reshape(amps.shape[0], 1 << (n_q - q - 1), 2, 1 << q)
    return view[:, :, 0, :], view[:, :, 1, :]


def _join(a0: np.ndarray, a1: np.ndarray) -> np.ndarray:
    n = a0.shape[0]
    return np.stack((a0, a1), axis=2).reshape(n, -1)


def _per_row(value, n: int) -> np.ndarray:
    """Broadcastable (N, 1, 1) view of a scalar or per-row coefficient."""
    arr = np.asarray(value)
    if arr.ndim == 0:
        return arr
    return arr.reshape(n, 1, 1)


def apply_1q(amps: np.ndarray, n_q: int, q: int, u: np.ndarray) -> np.ndarray:
    """Apply a 2x2 matrix ``u`` (shape (2, 2) or (N, 2, 2)) to qubit ``q``."""
    n = amps.shape[0]
    a0, a1 = _split(amps, n_q, q)
    if u.ndim == 2:
        u00, u01, u10, u11 = u[0, 0], u[0, 1], u[1, 0], u[1, 1]
    else:
        u00, u01, u10, u11 = (_per_row(u[:, i, j], n) for i, j in ((0, 0), (0, 1), (1, 0), (1, 1)))
    return _join(u00 * a0 + u01 * a1, u10 * a0 + u11 * a1)


def apply_h(amps: np.ndarray, n_q: int, q: int) -> np.ndarray:
    a0, a1 = _split(amps, n_q, q)
    return _join((a0 + a1) * _SQRT2_INV, (a0 - a1) * _SQRT2_INV)


def apply_ry(amps: np.ndarray, n_q: int, q: int, theta) -> np.ndarray:
    """RY on qubit ``q``; ``theta`` is a scalar or one angle per row."""
    n = amps.shape[0]
    half = np.asarray(theta, dtype=np.float64) / 2
    c, s = _per_row(np.cos(half), n), _per_row(np.sin(half), n)
    a0, a1 = _split(amps, n_q, q)
    return _join(c * a0 - s * a1, s * a0 + c * a1)


def apply_rz(amps: np.ndarray, n_q: int, q: int, phi) -> np.ndarray:
    n = amps.shape[0]
    half = np.asarray(phi, dtype=np.float64) / 2
    e_minus = _per_row(np.exp(-1j * half), n)
    e_plus = _per_row(np.exp(1j * half), n)
    a0, a1 = _split(amps, n_q, q)
    return _join(e_minus * a0, e_plus * a1)


@lru_cache(maxsize=None)
def cnot_permutation(n_q: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(1 << n_q)
    flip = ((idx >> control) & 1).astype(bool)
    out = idx.copy()
    out[flip] ^= 1 << target
    out.setflags(write=False)
    return out


def apply_cnot(amps: np.ndarray, n_q: int, control: int, target: int) -> np.ndarray:
    # CNOT is a self-inverse permutation, so gather == scatter here
    return amps[:, cnot_permutation(n_q, control, target)]


def apply_gate_batch(amps: np.ndarray, n_q: int, gate: Gate, angle=None) -> np.ndarray:
    """Apply ``gate`` to every row of ``amps``; ``angle`` overrides gate.angle
    and may hold one value per row."""
    a = gate.angle if angle is None else angle
    if gate.kind == "H":
        return apply_h(amps, n_q, gate.target)
    if gate.kind == "RY":
        return apply_ry(amps, n_q, gate.target, a)
    if gate.kind == "RZ":
        return apply_rz(amps, n_q, gate.target, a)
    return apply_cnot(amps, n_q, gate.control, gate.target)


@lru_cache(maxsize=None)
def z_signs(n_q: int) -> np.ndarray:
    """(n_q, 2**n_q) table of Z eigenvalues: +1 where bit j is 0, -1 where 1."""
    idx = np.arange(1 << n_q)
    bits = (idx[None, :] >> np.arange(n_q)[:, None]) & 1
    out = (1 - 2 * bits).astype(np.float64)
    out.setflags(write=False)
    return out


def measure_z_batch(amps: np.ndarray, n_q: int) -> np.ndarray:
    """<Z_j> for every row and qubit, shape (N, n_q)."""
    probs = amps.real**2 + amps.imag**2
    signs = z_signs(n_q)
    out = np.empty((amps.shape[0], n_q))
    for j in range(n_q):
        out[:, j] = np.sum(probs * signs[j], axis=1)
    return out


# ----------------------------------------------------------------------------
# single-instance API
# ----------------------------------------------------------------------------

def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    _check_gate(gate, state.n_q)
    out = apply_gate_batch(state.amps[None, :], state.n_q, gate)
    return StateVector(state.n_q, out[0])


def run_circuit(gates: Iterable[Gate], n_q: int, state: StateVector | None = None) -> StateVector:
    state = init_ground(n_q) if state is None else state
    for g in gates:
        state = apply_gate(state, g)
    return state


def expectation_z(state: StateVector, j: int) -> float:
    if not 0 <= j < state.n_q:
        raise UsageError(f"qubit index {j} out of range for {state.n_q} qubits")
    return float(measure_z_batch(state.amps[None, :], state.n_q)[0, j])


def measure_all_z(state: StateVector) -> np.ndarray:
    return measure_z_batch(state.amps[None, :], state.n_q)[0]


# ----------------------------------------------------------------------------
# dense oracle
# ----------------------------------------------------------------------------

def embed_gate(gate: Gate, n_q: int) -> np.ndarray:
    """Full 2**n_q x 2**n_q matrix of one gate, built from Kronecker products."""
    _check_gate(gate, n_q)
    if gate.kind != "CNOT":
        hi = np.eye(1 << (n_q - gate.target - 1))
        lo = np.eye(1 << gate.target)
        return np.kron(np.kron(hi, gate.matrix()), lo)
    # |0><0|_c (x) I + |1><1|_c (x) X_t, assembled per qubit
    p0 = np.array([[1, 0], [0, 0]], dtype=np.complex128)
    p1 = np.array([[0, 0], [0, 1]], dtype=np.complex128)
    x = np.array([[0, 1], [1, 0]], dtype=np.complex128)
    terms = []
    for proj, tgt_op in ((p0, np.eye(2)), (p1, x)):
        mat = np.ones((1, 1), dtype=np.complex128)
        for q in reversed(range(n_q)):
            if q == gate.control:
                op = proj
            elif q == gate.target:
                op = tgt_op
            else:
                op = np.eye(2)
            mat = np.kron(mat, op)
        terms.append(mat)
    return terms[0] + terms[1]


def dense_unitary(circuit: Sequence[Gate], n_q: int) -> np.ndarray:
    """Product of the embedded gate matrices in circuit order (last gate leftmost)."""
    if not isinstance(n_q, (int, np.integer)) or not 1 <= n_q <= DENSE_MAX_QUBITS:
        raise ConfigError(
            f"dense oracle is limited to 1..{DENSE_MAX_QUBITS} qubits, got {n_q!r}"
        )
    u = np.eye(1 << n_q, dtype=np.complex128)
    for g in circuit:
        u = embed_gate(g, n_q) @ u
    return u


def random_circuit(n_q: int, n_gates: int, rng: np.random.Generator) -> list[Gate]:
    kinds = GATE_KINDS if n_q > 1 else GATE_KINDS[:3]
    gates = []
    for _ in range(n_gates):
        kind = kinds[rng.integers(len(kinds))]
        if kind == "CNOT":
            c, t = rng.choice(n_q, size=2, replace=False)
            gates.append(Gate("CNOT", int(t), control=int(c)))
        elif kind == "H":
            gates.append(Gate("H", int(rng.integers(n_q))))
        else:
            gates.append(Gate(kind, int(rng.integers(n_q)), angle=float(rng.uniform(-np.pi, np.pi) * 2)))
    return gates


# ----------------------------------------------------------------------------
# debug text format: one gate per line, ``KIND target [control] [angle]``
# ----------------------------------------------------------------------------

def dumps_circuit(gates: Iterable[Gate]) -> str:
    lines = []
    for g in gates:
        if g.kind == "CNOT":
            lines.append(f"CNOT {g.target} {g.control}")
        elif g.kind == "H":
            lines.append(f"H {g.target}")
        else:
            lines.append(f"{g.kind} {g.target} {g.angle!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def loads_circuit(text: str) -> list[Gate]:
    gates = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0].upper()
        try:
            if kind == "CNOT" and len(parts) == 3:
                gates.append(Gate("CNOT", int(parts[1]), control=int(parts[2])))
            elif kind == "H" and len(parts) == 2:
                gates.append(Gate("H", int(parts[1])))
            elif kind in ("RY", "RZ") and len(parts) == 3:
                gates.append(Gate(kind, int(parts[1]), angle=float(parts[2])))
            else:
                raise UsageError(f"malformed gate {raw!r}")
        except ValueError as exc:
            raise UsageError(f"line {lineno}: {exc}") from None
    return gates
