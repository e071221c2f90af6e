"""Markovian open-system dynamics: noise channels and the master equation.

The generator acting on a density matrix rho is

    d rho / dt = -i [H, rho] + sum_n gamma_n ( L_n rho L_n^dag
                                               - (1/2) {L_n^dag L_n, rho} )

with hbar = 1.  Channels supported per qubit:

* depolarization along each Pauli axis k with rate gamma_d[k]; because
  sigma_k^2 = I the generic form collapses to
  gamma_d[k] (sigma_k rho sigma_k - rho)
* amplitude damping with rate gamma_a and jump operator sigma_minus = |0><1|
  (the ground state |0> is the fixed point)
* pure dephasing with rate gamma_p and jump operator sigma_z, giving
  gamma_p (sigma_z rho sigma_z - rho); off-diagonals decay at rate 2 gamma_p

The deterministic reference integrator is classic fixed-step fourth-order
Runge-Kutta with re-Hermitization and trace renormalization after every step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .qstate import (
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    SIGMA_MINUS,
    SIGMA_PLUS,
    lift_operator,
    num_qubits,
    pauli_string_matrix,
)

__all__ = [
    "Hamiltonian",
    "MasterSolution",
    "NoiseModel",
    "as_noise_list",
    "dissipator_amplitude",
    "dissipator_depolarization",
    "dissipator_phase",
    "dissipator_relaxation",
    "dissipator_total",
    "generic_dissipator",
    "integrate_master",
    "lindblad_rhs",
]


def _check_rate(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite non-negative rate, got {value!r}")
    return value


@dataclass(frozen=True)
class NoiseModel:
    """Per-qubit noise rates.

    gamma_d is the triple of depolarization rates along the x, y, z Pauli
    axes; gamma_a the amplitude-damping rate; gamma_p the pure-dephasing
    rate.  ``target_qubit`` selects the tensor factor the channels act on in
    a register of more than one qubit.
    """

    gamma_d: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma_a: float = 0.0
    gamma_p: float = 0.0
    target_qubit: int = 0

    def __post_init__(self):
        if len(self.gamma_d) != 3:
            raise ValueError("gamma_d must contain exactly three axis rates")
        object.__setattr__(
            self,
            "gamma_d",
            tuple(_check_rate(f"gamma_d[{k}]", g) for k, g in enumerate(self.gamma_d)),
        )
        object.__setattr__(self, "gamma_a", _check_rate("gamma_a", self.gamma_a))
        object.__setattr__(self, "gamma_p", _check_rate("gamma_p", self.gamma_p))
        if not isinstance(self.target_qubit, int) or self.target_qubit < 0:
            raise ValueError("target_qubit must be a non-negative integer")

    def is_trivial(self) -> bool:
        """True when every rate vanishes."""
        return (
            all(g == 0.0 for g in self.gamma_d)
            and self.gamma_a == 0.0
            and self.gamma_p == 0.0
        )

    def jump_operators(self, n_qubits: int = 1) -> list[tuple[float, np.ndarray]]:
        """(sqrt(rate), lifted operator) pairs, one per strictly positive rate.

        Channel order is fixed: depolarization x, y, z, then amplitude
        damping, then dephasing.  This order also indexes the Wiener channels
        of the stochastic unraveling.
        """
        if self.target_qubit >= n_qubits:
            raise ValueError(
                f"target qubit {self.target_qubit} outside register of {n_qubits}"
            )
        pairs = []
        for g, op in zip(self.gamma_d, (PAULI_X, PAULI_Y, PAULI_Z)):
            if g > 0:
                pairs.append((np.sqrt(g), lift_operator(op, n_qubits, self.target_qubit)))
        if self.gamma_a > 0:
            pairs.append(
                (np.sqrt(self.gamma_a), lift_operator(SIGMA_MINUS, n_qubits, self.target_qubit))
            )
        if self.gamma_p > 0:
            pairs.append(
                (np.sqrt(self.gamma_p), lift_operator(PAULI_Z, n_qubits, self.target_qubit))
            )
        return pairs

    def to_dict(self) -> dict:
        return {
            "gamma_d": list(self.gamma_d),
            "gamma_a": self.gamma_a,
            "gamma_p": self.gamma_p,
            "target_qubit": self.target_qubit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseModel":
        return cls(
            gamma_d=tuple(data.get("gamma_d", (0.0, 0.0, 0.0))),
            gamma_a=data.get("gamma_a", 0.0),
            gamma_p=data.get("gamma_p", 0.0),
            target_qubit=data.get("target_qubit", 0),
        )


def as_noise_list(noise) -> tuple[NoiseModel, ...]:
    """Normalize a NoiseModel or a sequence of them to a tuple."""
    if isinstance(noise, NoiseModel):
        return (noise,)
    items = tuple(noise)
    if not all(isinstance(m, NoiseModel) for m in items):
        raise ValueError("noise must be a NoiseModel or a sequence of NoiseModel")
    return items


def all_jump_operators(noise, n_qubits: int) -> list[tuple[float, np.ndarray]]:
    """Concatenated jump operators of every noise model, in model order."""
    pairs = []
    for model in as_noise_list(noise):
        pairs.extend(model.jump_operators(n_qubits))
    return pairs


@dataclass(frozen=True)
class Hamiltonian:
    """Hermitian system Hamiltonian as real-weighted Pauli strings."""

    n_qubits: int
    terms: tuple[tuple[float, str], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 1 <= self.n_qubits <= 3:
            raise ValueError("n_qubits must be 1, 2 or 3")
        checked = []
        for coeff, label in self.terms:
            coeff = float(coeff)
            if not np.isfinite(coeff):
                raise ValueError("Hamiltonian coefficients must be finite reals")
            if len(label) != self.n_qubits:
                raise ValueError(
                    f"Pauli string {label!r} does not match register of {self.n_qubits}"
                )
            pauli_string_matrix(label)  # validates the characters
            checked.append((coeff, label))
        object.__setattr__(self, "terms", tuple(checked))

    @classmethod
    def default(cls, n_qubits: int = 1, omega: float = 1.0) -> "Hamiltonian":
        """(omega/2) sigma_z on every qubit."""
        terms = []
        for q in range(n_qubits):
            label = "".join("Z" if k == q else "I" for k in range(n_qubits))
            terms.append((0.5 * omega, label))
        return cls(n_qubits=n_qubits, terms=tuple(terms))

    @classmethod
    def zero(cls, n_qubits: int = 1) -> "Hamiltonian":
        return cls(n_qubits=n_qubits, terms=())

    def matrix(self) -> np.ndarray:
        d = 2**self.n_qubits
        out = np.zeros((d, d), dtype=complex)
        for coeff, label in self.terms:
            out += coeff * pauli_string_matrix(label)
        return out

    def to_dict(self) -> dict:
        return {"n_qubits": self.n_qubits, "terms": [[c, s] for c, s in self.terms]}

    @classmethod
    def from_dict(cls, data: dict) -> "Hamiltonian":
        return cls(
            n_qubits=int(data["n_qubits"]),
            terms=tuple((float(c), str(s)) for c, s in data.get("terms", [])),
        )


# ---------------------------------------------------------------------------
# Dissipators


def _require_single_qubit(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise ValueError("this dissipator acts on a single qubit (2x2 matrix)")
    return rho


def dissipator_depolarization(rho, rates) -> np.ndarray:
    """sum_k gamma_d[k] (sigma_k rho sigma_k - rho) on one qubit."""
    rho = _require_single_qubit(rho)
    rates = tuple(_check_rate(f"rates[{k}]", g) for k, g in enumerate(rates))
    if len(rates) != 3:
        raise ValueError("depolarization needs three axis rates")
    out = np.zeros_like(rho)
    for g, s in zip(rates, (PAULI_X, PAULI_Y, PAULI_Z)):
        if g > 0:
            out += g * (s @ rho @ s - rho)
    return out


def dissipator_amplitude(rho, gamma_a: float) -> np.ndarray:
    """gamma_a (s- rho s+ - (1/2){s+ s-, rho}) on one qubit."""
    rho = _require_single_qubit(rho)
    gamma_a = _check_rate("gamma_a", gamma_a)
    if gamma_a == 0:
        return np.zeros_like(rho)
    number_op = SIGMA_PLUS @ SIGMA_MINUS  # |1><1|
    return gamma_a * (
        SIGMA_MINUS @ rho @ SIGMA_PLUS
        - 0.5 * (number_op @ rho + rho @ number_op)
    )


def dissipator_phase(rho, gamma_p: float) -> np.ndarray:
    """gamma_p (sigma_z rho sigma_z - rho) on one qubit."""
    rho = _require_single_qubit(rho)
    gamma_p = _check_rate("gamma_p", gamma_p)
    if gamma_p == 0:
        return np.zeros_like(rho)
    return gamma_p * (PAULI_Z @ rho @ PAULI_Z - rho)


def dissipator_relaxation(rho, gamma_a: float, gamma_p: float) -> np.ndarray:
    """Amplitude damping plus pure dephasing on one qubit."""
    return dissipator_amplitude(rho, gamma_a) + dissipator_phase(rho, gamma_p)


def generic_dissipator(rho, weighted_ops) -> np.ndarray:
    """sum_n gamma_n (L rho L^dag - (1/2){L^dag L, rho}) from (sqrt(gamma), L) pairs."""
    rho = np.asarray(rho, dtype=complex)
    out = np.zeros_like(rho)
    for w, L in weighted_ops:
        Lt = np.asarray(L, dtype=complex) * w  # sqrt(gamma) folded into the operator
        LtdLt = Lt.conj().T @ Lt
        out += Lt @ rho @ Lt.conj().T - 0.5 * (LtdLt @ rho + rho @ LtdLt)
    return out


def dissipator_total(rho, noise) -> np.ndarray:
    """Sum of all channel dissipators of ``noise`` acting on ``rho``.

    Built channel by channel from the explicit depolarization / damping /
    dephasing formulas lifted to the register; tests verify it coincides with
    :func:`generic_dissipator` over the same jump operators.
    """
    rho = np.asarray(rho, dtype=complex)
    n = num_qubits(rho.shape[0])
    out = np.zeros_like(rho)
    for model in as_noise_list(noise):
        if model.target_qubit >= n:
            raise ValueError(
                f"target qubit {model.target_qubit} outside register of {n}"
            )
        for g, s in zip(model.gamma_d, (PAULI_X, PAULI_Y, PAULI_Z)):
            if g > 0:
                S = lift_operator(s, n, model.target_qubit)
                out += g * (S @ rho @ S - rho)
        if model.gamma_a > 0:
            Sm = lift_operator(SIGMA_MINUS, n, model.target_qubit)
            Sp = lift_operator(SIGMA_PLUS, n, model.target_qubit)
            nop = Sp @ Sm
            out += model.gamma_a * (Sm @ rho @ Sp - 0.5 * (nop @ rho + rho @ nop))
        if model.gamma_p > 0:
            Z = lift_operator(PAULI_Z, n, model.target_qubit)
            out += model.gamma_p * (Z @ rho @ Z - rho)
    return out


def lindblad_rhs(rho, hamiltonian: Hamiltonian, noise) -> np.ndarray:
    """Right-hand side -i[H, rho] + dissipator_total(rho, noise)."""
    rho = np.asarray(rho, dtype=complex)
    H = hamiltonian.matrix()
    return -1j * (H @ rho - rho @ H) + dissipator_total(rho, noise)


# ---------------------------------------------------------------------------
# Deterministic reference integration


@dataclass(frozen=True)
class MasterSolution:
    """Density-matrix trajectory on a uniform time grid."""

    times: np.ndarray
    states: np.ndarray  # (n_steps + 1, d, d) complex
    step_size: float

    def state_at(self, t: float) -> np.ndarray:
        """State at the grid point nearest to ``t`` (must lie on the grid)."""
        idx = int(round(t / self.step_size))
        if not 0 <= idx < len(self.times) or abs(self.times[idx] - t) > 1e-9:
            raise ValueError(f"time {t} is not on the integration grid")
        return self.states[idx]

    def to_csv(self, path) -> None:
        """Write columns: time, then row-major re/im density entries."""
        d = self.states.shape[1]
        header = ["time"]
        for i in range(d):
            for j in range(d):
                header += [f"re_{i}{j}", f"im_{i}{j}"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t, rho in zip(self.times, self.states):
                row = [f"{t:.12g}"]
                for entry in rho.reshape(-1):
                    row += [repr(float(entry.real)), repr(float(entry.imag))]
                writer.writerow(row)


def integrate_master(rho0, hamiltonian: Hamiltonian, noise, t_end: float, dt: float) -> MasterSolution:
    """Integrate the master equation with fixed-step RK4.

    After every step the iterate is re-Hermitized, (rho + rho^dag)/2, and
    trace-renormalized, which removes the slow drift of those invariants.
    The step count is round(t_end / dt) and the recorded effective step is
    t_end divided by that count.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    n = num_qubits(rho0.shape[0])
    if hamiltonian.n_qubits != n:
        raise ValueError("Hamiltonian register size does not match the state")
    if not np.allclose(rho0, rho0.conj().T, atol=1e-8):
        raise ValueError("initial density matrix is not Hermitian")
    if abs(np.trace(rho0).real - 1.0) > 1e-8:
        raise ValueError("initial density matrix is not trace one")
    if np.linalg.eigvalsh(rho0).min() < -1e-8:
        raise ValueError("initial density matrix is not positive semidefinite")
    t_end = float(t_end)
    dt = float(dt)
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end == 0.0:
        return MasterSolution(np.zeros(1), rho0[None, :, :].copy(), dt)
    if dt >= t_end:
        raise ValueError(f"dt={dt} must be smaller than t_end={t_end}")

    n_steps = max(1, round(t_end / dt))
    h = t_end / n_steps

    H = hamiltonian.matrix()
    pairs = all_jump_operators(noise, n)
    scaled = [(w * L) for w, L in pairs]
    scaled_dag = [L.conj().T for L in scaled]
    scaled_sq = [Ld @ L for L, Ld in zip(scaled, scaled_dag)]

    def rhs(rho):
        out = -1j * (H @ rho - rho @ H)
        for L, Ld, M in zip(scaled, scaled_dag, scaled_sq):
            out += L @ rho @ Ld - 0.5 * (M @ rho + rho @ M)
        return out

    states = np.empty((n_steps + 1, *rho0.shape), dtype=complex)
    states[0] = rho0
    rho = rho0.copy()
    for k in range(n_steps):
        k1 = rhs(rho)
        k2 = rhs(rho + 0.5 * h * k1)
        k3 = rhs(rho + 0.5 * h * k2)
        k4 = rhs(rho + h * k3)
        rho = rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        rho = 0.5 * (rho + rho.conj().T)
        rho = rho / np.trace(rho).real
        if not np.all(np.isfinite(rho.view(float))):
            raise FloatingPointError(f"master integration diverged at step {k + 1}")
        states[k + 1] = rho

    times = np.arange(n_steps + 1) * h
    return MasterSolution(times=times, states=states, step_size=h)
