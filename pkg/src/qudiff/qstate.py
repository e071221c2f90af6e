"""State vectors, density matrices, Pauli operators, and distance measures.

Everything is a plain numpy array in the computational basis with |0> first:

* state vector: ``complex128``, shape ``(2**n,)`` with ``1 <= n <= 3``
* density matrix: ``complex128``, shape ``(2**n, 2**n)``
* real embedding: ``float64``, shape ``(2 * 2**n,)``, real parts of all
  amplitudes followed by imaginary parts

``complex128`` stores each amplitude as an explicit (re, im) pair of IEEE
doubles, which keeps serialization and bit-level reproducibility trivial.
Dense matrices are fine at these dimensions (at most 8 x 8).

Functions here are pure and never mutate their inputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "PAULI_X",
    "PAULI_Y",
    "PAULI_Z",
    "IDENTITY_2",
    "SIGMA_MINUS",
    "SIGMA_PLUS",
    "anticommutator",
    "bloch_vector",
    "commutator",
    "density_from_json",
    "density_to_json",
    "fidelity_pure",
    "haar_state",
    "lift_operator",
    "num_qubits",
    "pauli_string_matrix",
    "pure_density",
    "random_density",
    "real_embed",
    "real_unembed",
    "state_from_json",
    "state_to_json",
    "trace_distance",
    "validate_density",
    "validate_state",
]

_ATOL = 1e-10

PAULI_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
PAULI_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
PAULI_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)

# Lowering operator |0><1|: annihilates the ground state |0>, maps the
# excited state |1> to |0>.  Its adjoint SIGMA_PLUS = |1><0| raises.
SIGMA_MINUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.conj().T.copy()

for _m in (PAULI_X, PAULI_Y, PAULI_Z, IDENTITY_2, SIGMA_MINUS, SIGMA_PLUS):
    _m.setflags(write=False)

_PAULI_BY_LABEL = {
    "I": IDENTITY_2,
    "X": PAULI_X,
    "Y": PAULI_Y,
    "Z": PAULI_Z,
}


def num_qubits(dim: int) -> int:
    """Qubit count for a Hilbert-space dimension, validating 2**n with n in 1..3."""
    n = int(dim).bit_length() - 1
    if dim < 2 or 2**n != dim or n > 3:
        raise ValueError(
            f"dimension {dim} is not a supported qubit register size (2, 4 or 8)"
        )
    return n


def validate_state(psi, require_normalized: bool = True) -> np.ndarray:
    """Validate and return a state vector as a complex128 array.

    Raises ValueError for a wrong shape, non-finite entries, or (when
    ``require_normalized``) a norm off unity by more than 1e-10.
    """
    psi = np.asarray(psi, dtype=complex)
    if psi.ndim != 1:
        raise ValueError(f"state vector must be one-dimensional, got shape {psi.shape}")
    num_qubits(psi.shape[0])
    if not np.all(np.isfinite(psi.view(float))):
        raise ValueError("state vector contains non-finite entries")
    if require_normalized:
        nrm = np.linalg.norm(psi)
        if abs(nrm - 1.0) > _ATOL:
            raise ValueError(f"state vector norm {nrm!r} differs from 1 by more than {_ATOL}")
    return psi


def validate_density(rho, atol: float = 1e-8) -> np.ndarray:
    """Validate and return a density matrix as a complex128 array.

    Checks shape, Hermiticity, unit trace, and positive semidefiniteness
    (eigenvalues above ``-atol``).
    """
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"density matrix must be square, got shape {rho.shape}")
    num_qubits(rho.shape[0])
    if not np.all(np.isfinite(rho.view(float))):
        raise ValueError("density matrix contains non-finite entries")
    if not np.allclose(rho, rho.conj().T, atol=atol):
        raise ValueError("density matrix is not Hermitian")
    tr = np.trace(rho).real
    if abs(tr - 1.0) > atol:
        raise ValueError(f"density matrix trace {tr!r} differs from 1")
    if np.linalg.eigvalsh(rho).min() < -atol:
        raise ValueError("density matrix has a negative eigenvalue")
    return rho


def commutator(a, b) -> np.ndarray:
    """[a, b] = ab - ba."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    return a @ b - b @ a


def anticommutator(a, b) -> np.ndarray:
    """{a, b} = ab + ba."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    return a @ b + b @ a


def pure_density(psi) -> np.ndarray:
    """Projector |psi><psi| of a normalized state vector."""
    psi = validate_state(psi)
    return np.outer(psi, psi.conj())


def fidelity_pure(psi, phi) -> float:
    """|<psi|phi>|^2 for two normalized pure states.

    Invariant under a global phase on either argument.  The result is clipped
    into [0, 1] to absorb last-ulp rounding.
    """
    psi = validate_state(psi)
    phi = validate_state(phi)
    if psi.shape != phi.shape:
        raise ValueError("states live in different Hilbert spaces")
    return float(min(1.0, max(0.0, abs(np.vdot(psi, phi)) ** 2)))


def trace_distance(rho, sigma) -> float:
    """Half the trace norm of rho - sigma.

    For Hermitian arguments this is half the sum of absolute eigenvalues of
    the difference.  Sorting the absolute spectrum before summing makes the
    result symmetric in its arguments bit for bit.
    """
    rho = np.asarray(rho, dtype=complex)
    sigma = np.asarray(sigma, dtype=complex)
    if rho.shape != sigma.shape or rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("trace_distance needs two square matrices of equal shape")
    eigs = np.linalg.eigvalsh(rho - sigma)
    return float(0.5 * np.sort(np.abs(eigs)).sum())


def bloch_vector(rho) -> np.ndarray:
    """Bloch vector (tr rho X, tr rho Y, tr rho Z) of a single-qubit density matrix."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise ValueError("bloch_vector is defined for single-qubit density matrices")
    return np.array(
        [
            np.trace(rho @ PAULI_X).real,
            np.trace(rho @ PAULI_Y).real,
            np.trace(rho @ PAULI_Z).real,
        ]
    )


def real_embed(psi) -> np.ndarray:
    """Map a complex state vector to [Re psi; Im psi] in R^(2d).

    The map is linear over the reals, preserves the Euclidean norm, and is
    inverted exactly by :func:`real_unembed`.
    """
    psi = np.asarray(psi, dtype=complex)
    if psi.ndim != 1:
        raise ValueError("real_embed expects a one-dimensional state vector")
    return np.concatenate([psi.real, psi.imag])


def real_unembed(x) -> np.ndarray:
    """Inverse of :func:`real_embed`; exact round trip."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] % 2 != 0:
        raise ValueError("real embedding must be a flat vector of even length")
    d = x.shape[0] // 2
    return x[:d] + 1j * x[d:]


def lift_operator(op, n_qubits_total: int, target: int) -> np.ndarray:
    """Tensor a single-qubit operator into an n-qubit register at ``target``.

    Qubit 0 is the leftmost tensor factor.
    """
    op = np.asarray(op, dtype=complex)
    if op.shape != (2, 2):
        raise ValueError("lift_operator expects a 2x2 operator")
    if not 0 <= target < n_qubits_total:
        raise ValueError(f"target qubit {target} outside register of {n_qubits_total}")
    out = np.array([[1.0 + 0.0j]])
    for q in range(n_qubits_total):
        out = np.kron(out, op if q == target else IDENTITY_2)
    return out


def pauli_string_matrix(label: str) -> np.ndarray:
    """Dense matrix of a Pauli string such as "Z", "XY" or "IZX"."""
    if not label or any(c not in _PAULI_BY_LABEL for c in label):
        raise ValueError(f"invalid Pauli string {label!r} (use characters I, X, Y, Z)")
    if len(label) > 3:
        raise ValueError("registers beyond 3 qubits are out of scope")
    out = np.array([[1.0 + 0.0j]])
    for c in label:
        out = np.kron(out, _PAULI_BY_LABEL[c])
    return out


def haar_state(n_qubits: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random pure state on ``n_qubits`` qubits."""
    if not 1 <= n_qubits <= 3:
        raise ValueError("n_qubits must be 1, 2 or 3")
    d = 2**n_qubits
    z = rng.standard_normal(d) + 1j * rng.standard_normal(d)
    return z / np.linalg.norm(z)


def random_density(n_qubits: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random full- or fixed-rank density matrix (for tests)."""
    d = 2**n_qubits
    r = d if rank is None else rank
    weights = rng.dirichlet(np.ones(r))
    rho = np.zeros((d, d), dtype=complex)
    for w in weights:
        psi = haar_state(n_qubits, rng)
        rho += w * np.outer(psi, psi.conj())
    return rho


# ---------------------------------------------------------------------------
# JSON forms: states as arrays of [re, im] pairs, density matrices row-major
# with an explicit qubit count.


def state_to_json(psi) -> list:
    psi = np.asarray(psi, dtype=complex)
    return [[float(a.real), float(a.imag)] for a in psi]


def state_from_json(data) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("state JSON must be a list of [re, im] pairs")
    return arr[:, 0] + 1j * arr[:, 1]


def density_to_json(rho) -> dict:
    rho = np.asarray(rho, dtype=complex)
    n = num_qubits(rho.shape[0])
    flat = rho.reshape(-1)
    return {
        "n": n,
        "entries": [[float(a.real), float(a.imag)] for a in flat],
    }


def density_from_json(data) -> np.ndarray:
    n = int(data["n"])
    d = 2**n
    arr = np.asarray(data["entries"], dtype=float)
    if arr.shape != (d * d, 2):
        raise ValueError("density JSON entry count does not match its qubit count")
    return (arr[:, 0] + 1j * arr[:, 1]).reshape(d, d)
