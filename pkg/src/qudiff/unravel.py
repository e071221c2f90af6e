"""Linear stochastic unraveling of the master equation over state vectors.

A noisy register evolves as the linear Ito equation

    d psi = [ -i H - (1/2) sum_n gamma_n L_n^dag L_n ] psi dt
            + sum_n i sqrt(gamma_n) L_n psi dW_n

with one independent real Wiener process per jump operator.  Trajectories are
left unnormalized; averaging the projectors |psi><psi| over trajectories and
renormalizing by the trace reproduces the master equation, and the squared
norm is a martingale (its expectation stays at 1).

Reproducibility contract: the Wiener increments of trajectory ``j`` come from
a counter-based stream keyed by ``(seed, j)``, so a trajectory is a pure
function of ``(seed, j)`` regardless of batching, chunk size, or thread
count.  The step kernels below are written as elementwise array operations
with a fixed accumulation order over the (tiny) Hilbert dimension, which
makes a state simulated inside a large batch bit-identical to the same
trajectory simulated alone.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .lindblad import Hamiltonian, all_jump_operators, as_noise_list
from .qstate import num_qubits, trace_distance
from .rng import normal_stream

__all__ = [
    "Ensemble",
    "SdeConfig",
    "SdeDivergenceError",
    "Trajectory",
    "WienerIncrements",
    "build_sde_operators",
    "diffusion_columns",
    "drift",
    "em_step",
    "ensemble_density",
    "ensemble_from_binary",
    "ensemble_summary_csv",
    "ensemble_to_binary",
    "lipschitz_report",
    "platen_step",
    "simulate_ensemble",
    "simulate_trajectory",
]

_INTEGRATORS = ("euler_maruyama", "platen_srk")


class SdeDivergenceError(RuntimeError):
    """A trajectory produced a non-finite state."""

    def __init__(self, step: int, time: float, trajectory_id: int, detail: str = ""):
        self.step = step
        self.time = time
        self.trajectory_id = trajectory_id
        msg = (
            f"trajectory {trajectory_id} diverged at step {step} (t={time:.6g})"
        )
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass(frozen=True)
class SdeConfig:
    """Grid and integrator choices for trajectory simulation."""

    t_end: float = 1.0
    dt: float = 1e-3
    integrator: str = "euler_maruyama"
    seed: int = 0
    renormalize_each_step: bool = False

    def __post_init__(self):
        if not np.isfinite(self.t_end) or self.t_end <= 0:
            raise ValueError("t_end must be a positive finite time")
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise ValueError("dt must be a positive finite step")
        if self.dt > self.t_end:
            raise ValueError("dt must not exceed t_end")
        if self.integrator not in _INTEGRATORS:
            raise ValueError(f"integrator must be one of {_INTEGRATORS}")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_steps(self) -> int:
        """Step count after rounding t_end / dt to an integer."""
        return max(1, round(self.t_end / self.dt))

    @property
    def dt_effective(self) -> float:
        """The step actually used: t_end / n_steps."""
        return self.t_end / self.n_steps

    def to_dict(self) -> dict:
        return {
            "t_end": self.t_end,
            "dt": self.dt,
            "integrator": self.integrator,
            "seed": self.seed,
            "renormalize_each_step": self.renormalize_each_step,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SdeConfig":
        return cls(
            t_end=float(data.get("t_end", 1.0)),
            dt=float(data.get("dt", 1e-3)),
            integrator=str(data.get("integrator", "euler_maruyama")),
            seed=int(data.get("seed", 0)),
            renormalize_each_step=bool(data.get("renormalize_each_step", False)),
        )


class WienerIncrements:
    """Per-step, per-channel Gaussian increments dW ~ N(0, dt) of one trajectory.

    ``values[step, channel]`` is addressed by (seed, trajectory_id, step,
    channel): the stream keyed by (seed, trajectory_id) is filled in C order,
    so the same coordinates always reproduce the same double.
    """

    def __init__(self, seed: int, trajectory_id: int, n_steps: int, n_channels: int, dt: float):
        if n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if n_channels < 0:
            raise ValueError("n_channels must be non-negative")
        if not np.isfinite(dt) or dt <= 0:
            raise ValueError("dt must be positive")
        self.seed = seed
        self.trajectory_id = trajectory_id
        self.dt = float(dt)
        self.values = normal_stream(seed, trajectory_id, (n_steps, n_channels)) * np.sqrt(dt)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


def build_sde_operators(hamiltonian: Hamiltonian, noise) -> tuple[np.ndarray, list[np.ndarray]]:
    """Drift matrix A and diffusion matrices B_n of the linear unraveling.

    A = -iH - (1/2) sum_n gamma_n L_n^dag L_n and B_n = i sqrt(gamma_n) L_n,
    so that d psi = A psi dt + sum_n B_n psi dW_n.
    """
    n = hamiltonian.n_qubits
    H = hamiltonian.matrix()
    A = -1j * H
    Bs = []
    for w, L in all_jump_operators(noise, n):
        scaled = w * L
        A = A - 0.5 * (scaled.conj().T @ scaled)
        Bs.append(1j * scaled)
    return A, Bs


def drift(psi, hamiltonian: Hamiltonian, noise) -> np.ndarray:
    """Deterministic part A psi of the unraveled equation."""
    psi = np.asarray(psi, dtype=complex)
    A, _ = build_sde_operators(hamiltonian, noise)
    return A @ psi


def diffusion_columns(psi, hamiltonian: Hamiltonian, noise) -> list[np.ndarray]:
    """Stochastic columns B_n psi, one per jump operator, in channel order."""
    psi = np.asarray(psi, dtype=complex)
    _, Bs = build_sde_operators(hamiltonian, noise)
    return [B @ psi for B in Bs]


# ---------------------------------------------------------------------------
# Step kernels.  States are (batch, d) arrays; the loops below run over the
# Hilbert dimension (<= 8) and channels only, leaving numpy to vectorize over
# the batch.  Each output element is produced by the same sequence of scalar
# IEEE operations whatever the batch size, which is what makes chunked,
# threaded and solo runs agree bit for bit.


def _apply_matrix(M: np.ndarray, psi: np.ndarray) -> np.ndarray:
    d = psi.shape[1]
    cols = []
    for i in range(d):
        acc = M[i, 0] * psi[:, 0]
        for j in range(1, d):
            acc = acc + M[i, j] * psi[:, j]
        cols.append(acc)
    return np.stack(cols, axis=1)


def _em_step_batch(psi: np.ndarray, dt: float, dw: np.ndarray, A: np.ndarray, Bs) -> np.ndarray:
    out = psi + dt * _apply_matrix(A, psi)
    for k, B in enumerate(Bs):
        out = out + dw[:, k : k + 1] * _apply_matrix(B, psi)
    return out


def _platen_step_batch(psi: np.ndarray, dt: float, dw: np.ndarray, A: np.ndarray, Bs) -> np.ndarray:
    # Explicit strong order-1.0 scheme with one supporting value per channel:
    #   base   = psi + f dt
    #   supp_k = base + g_k sqrt(dt)
    #   out    = base + sum_k g_k dW_k
    #            + sum_k [g_k(supp_k) - g_k(psi)] (dW_k^2 - dt) / (2 sqrt(dt))
    # For vanishing diffusion it reduces exactly to the Euler-Maruyama step.
    f = _apply_matrix(A, psi)
    base = psi + dt * f
    out = base
    cols = [_apply_matrix(B, psi) for B in Bs]
    for k in range(len(Bs)):
        out = out + dw[:, k : k + 1] * cols[k]
    if Bs:
        sq = np.sqrt(dt)
        for k, B in enumerate(Bs):
            supp = base + sq * cols[k]
            col_supp = _apply_matrix(B, supp)
            weight = (dw[:, k] * dw[:, k] - dt) / (2.0 * sq)
            out = out + weight[:, None] * (col_supp - cols[k])
    return out


_STEP_KERNELS = {
    "euler_maruyama": _em_step_batch,
    "platen_srk": _platen_step_batch,
}


def em_step(psi, dt: float, dw, drift_matrix, diffusion_matrices) -> np.ndarray:
    """One Euler-Maruyama step of a single state vector.

    ``dw`` holds one increment per channel, in the channel order of
    ``build_sde_operators``.  Deterministic given its inputs.
    """
    psi = np.asarray(psi, dtype=complex)
    dw = np.atleast_1d(np.asarray(dw, dtype=float))
    if dw.shape[0] != len(diffusion_matrices):
        raise ValueError("one Wiener increment is required per diffusion channel")
    return _em_step_batch(psi[None, :], float(dt), dw[None, :], drift_matrix, diffusion_matrices)[0]


def platen_step(psi, dt: float, dw, drift_matrix, diffusion_matrices) -> np.ndarray:
    """One explicit strong order-1.0 stochastic Runge-Kutta step of a single state."""
    psi = np.asarray(psi, dtype=complex)
    dw = np.atleast_1d(np.asarray(dw, dtype=float))
    if dw.shape[0] != len(diffusion_matrices):
        raise ValueError("one Wiener increment is required per diffusion channel")
    return _platen_step_batch(psi[None, :], float(dt), dw[None, :], drift_matrix, diffusion_matrices)[0]


@dataclass(frozen=True)
class Trajectory:
    """One unnormalized trajectory on the full step grid.

    ``norms[k]`` is the raw state norm at grid point k before any
    renormalization, so the martingale property can be checked even when
    ``renormalize_each_step`` is on.
    """

    times: np.ndarray
    states: np.ndarray  # (n_steps + 1, d) complex
    norms: np.ndarray
    trajectory_id: int
    config: SdeConfig


def _run_batch(psi0, A, Bs, config: SdeConfig, increments, record_indices, first_id):
    """Advance a batch of trajectories, recording states/norms at given indices."""
    n_steps = config.n_steps
    dt = config.dt_effective
    kernel = _STEP_KERNELS[config.integrator]
    batch = increments.shape[0]
    d = psi0.shape[0]

    record_set = {int(i) for i in record_indices}
    rec_states = np.empty((batch, len(record_indices), d), dtype=complex)
    rec_norms = np.empty((batch, len(record_indices)), dtype=float)
    rec_pos = {idx: pos for pos, idx in enumerate(record_indices)}

    psi = np.tile(psi0, (batch, 1))
    norms = np.linalg.norm(psi, axis=1)
    if 0 in record_set:
        rec_states[:, rec_pos[0], :] = psi
        rec_norms[:, rec_pos[0]] = norms

    for k in range(n_steps):
        psi = kernel(psi, dt, increments[:, k, :], A, Bs)
        finite = np.isfinite(psi.view(float)).reshape(batch, -1).all(axis=1)
        if not finite.all():
            bad = int(np.argmin(finite))
            raise SdeDivergenceError(
                step=k + 1,
                time=(k + 1) * dt,
                trajectory_id=first_id + bad,
                detail=(
                    f"{int((~finite).sum())} of {batch} states non-finite; "
                    f"max |dW| this step = {np.abs(increments[:, k, :]).max() if increments.shape[2] else 0.0:.3g} "
                    f"over {increments.shape[2]} channels"
                ),
            )
        norms = np.linalg.norm(psi, axis=1)
        if config.renormalize_each_step:
            psi = psi / norms[:, None]
        if (k + 1) in record_set:
            pos = rec_pos[k + 1]
            rec_states[:, pos, :] = psi
            rec_norms[:, pos] = norms
    return rec_states, rec_norms


def simulate_trajectory(psi0, hamiltonian: Hamiltonian, noise, config: SdeConfig, trajectory_id: int = 0) -> Trajectory:
    """Simulate one trajectory, deterministic in (config.seed, trajectory_id)."""
    psi0 = np.asarray(psi0, dtype=complex)
    n = num_qubits(psi0.shape[0])
    if hamiltonian.n_qubits != n:
        raise ValueError("Hamiltonian register size does not match the state")
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-10:
        raise ValueError("initial state must be normalized")
    A, Bs = build_sde_operators(hamiltonian, noise)
    n_steps = config.n_steps
    inc = WienerIncrements(config.seed, trajectory_id, n_steps, len(Bs), config.dt_effective)
    record = list(range(n_steps + 1))
    states, norms = _run_batch(
        psi0, A, Bs, config, inc.values[None, :, :], record, trajectory_id
    )
    times = np.arange(n_steps + 1) * config.dt_effective
    return Trajectory(
        times=times,
        states=states[0],
        norms=norms[0],
        trajectory_id=trajectory_id,
        config=config,
    )


@dataclass(frozen=True)
class Ensemble:
    """States of many trajectories recorded at a common subset of grid points."""

    times: np.ndarray            # recorded times, shape (R,)
    record_indices: tuple        # grid indices behind ``times``
    states: np.ndarray           # (N, R, d) complex, unnormalized unless configured
    norms: np.ndarray            # (N, R) raw norms at the recorded points
    config: SdeConfig
    hamiltonian: Hamiltonian
    noise: tuple
    psi0: np.ndarray

    @property
    def n_trajectories(self) -> int:
        return self.states.shape[0]


def simulate_ensemble(
    psi0,
    hamiltonian: Hamiltonian,
    noise,
    config: SdeConfig,
    n_trajectories: int,
    record_indices=None,
    threads: int = 1,
    chunk_size: int = 2048,
) -> Ensemble:
    """Simulate ``n_trajectories`` independent trajectories.

    Trajectory ``j`` uses the Wiener stream keyed by ``(config.seed, j)``;
    the result is therefore independent of ``threads`` and ``chunk_size``.
    ``record_indices`` selects which grid points to keep (default: initial
    and final), which bounds memory for large ensembles.
    """
    psi0 = np.asarray(psi0, dtype=complex)
    n = num_qubits(psi0.shape[0])
    if hamiltonian.n_qubits != n:
        raise ValueError("Hamiltonian register size does not match the state")
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-10:
        raise ValueError("initial state must be normalized")
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be at least 1")
    n_steps = config.n_steps
    if record_indices is None:
        record_indices = (0, n_steps)
    record_indices = tuple(int(i) for i in record_indices)
    if any(i < 0 or i > n_steps for i in record_indices):
        raise ValueError("record indices must lie on the step grid")
    if len(set(record_indices)) != len(record_indices):
        raise ValueError("record indices must be unique")

    A, Bs = build_sde_operators(hamiltonian, noise)
    dt = config.dt_effective
    d = psi0.shape[0]

    states = np.empty((n_trajectories, len(record_indices), d), dtype=complex)
    norms = np.empty((n_trajectories, len(record_indices)), dtype=float)

    chunks = [
        (start, min(start + chunk_size, n_trajectories))
        for start in range(0, n_trajectories, chunk_size)
    ]

    def run_chunk(bounds):
        start, stop = bounds
        inc = np.stack(
            [
                normal_stream(config.seed, j, (n_steps, len(Bs)))
                for j in range(start, stop)
            ]
        ) * np.sqrt(dt)
        return _run_batch(psi0, A, Bs, config, inc, record_indices, start)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]
    for (start, stop), (cs, cn) in zip(chunks, results):
        states[start:stop] = cs
        norms[start:stop] = cn

    times = np.asarray(record_indices, dtype=float) * dt
    return Ensemble(
        times=times,
        record_indices=record_indices,
        states=states,
        norms=norms,
        config=config,
        hamiltonian=hamiltonian,
        noise=as_noise_list(noise),
        psi0=psi0,
    )


def ensemble_density(ensemble: Ensemble, t_index: int) -> np.ndarray:
    """Trace-normalized mean projector over trajectories at a recorded index.

    ``t_index`` indexes ``ensemble.record_indices`` (negative indexing
    allowed).  The average is a commutative sum; reordering trajectories
    moves the result by no more than ~1e-15.
    """
    s = ensemble.states[:, t_index, :]
    rho = (s.T @ s.conj()) / s.shape[0]
    tr = np.trace(rho).real
    if tr <= 0 or not np.isfinite(tr):
        raise FloatingPointError("ensemble produced a non-positive mean trace")
    return rho / tr


def ensemble_summary_csv(ensemble: Ensemble, path, reference=None) -> None:
    """Write (time, mean raw norm, trace distance to reference) per recorded point.

    ``reference`` is an optional MasterSolution on the same grid; without it
    the distance column is left empty.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "mean_norm", "trace_distance_to_reference"])
        for pos, (idx, t) in enumerate(zip(ensemble.record_indices, ensemble.times)):
            mean_norm = float(ensemble.norms[:, pos].mean())
            if reference is not None:
                rho = ensemble_density(ensemble, pos)
                td = trace_distance(rho, reference.state_at(float(t)))
                writer.writerow([f"{t:.12g}", repr(mean_norm), repr(td)])
            else:
                writer.writerow([f"{t:.12g}", repr(mean_norm), ""])


_ENSEMBLE_MAGIC = b"QENS"
_ENSEMBLE_VERSION = 1


def ensemble_to_binary(ensemble: Ensemble, path, config_digest: str = "") -> None:
    """Serialize recorded ensemble states to a little-endian binary file.

    Layout: magic, version, n_qubits, n_trajectories, n_recorded, step count,
    seed, digest (length-prefixed UTF-8), recorded grid indices, recorded
    times, then per-trajectory packed doubles: for each recorded point the
    raw norm followed by interleaved re/im amplitudes.
    """
    n = num_qubits(ensemble.states.shape[2])
    header = struct.pack(
        "<4sIIIIIQ",
        _ENSEMBLE_MAGIC,
        _ENSEMBLE_VERSION,
        n,
        ensemble.states.shape[0],
        ensemble.states.shape[1],
        ensemble.config.n_steps,
        ensemble.config.seed,
    )
    digest_bytes = config_digest.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", len(digest_bytes)))
        fh.write(digest_bytes)
        fh.write(np.asarray(ensemble.record_indices, dtype="<u4").tobytes())
        fh.write(np.asarray(ensemble.times, dtype="<f8").tobytes())
        interleaved = np.empty(
            (*ensemble.states.shape, 2), dtype="<f8"
        )
        interleaved[..., 0] = ensemble.states.real
        interleaved[..., 1] = ensemble.states.imag
        fh.write(np.ascontiguousarray(ensemble.norms, dtype="<f8").tobytes())
        fh.write(interleaved.tobytes())


def ensemble_from_binary(path) -> dict:
    """Read back the binary ensemble file as plain arrays plus metadata."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sIIIIIQ"))
        magic, version, n, n_traj, n_rec, n_steps, seed = struct.unpack("<4sIIIIIQ", head)
        if magic != _ENSEMBLE_MAGIC:
            raise ValueError("not an ensemble file (bad magic)")
        if version != _ENSEMBLE_VERSION:
            raise ValueError(f"unsupported ensemble file version {version}")
        (dlen,) = struct.unpack("<I", fh.read(4))
        digest = fh.read(dlen).decode("utf-8")
        record_indices = np.frombuffer(fh.read(4 * n_rec), dtype="<u4")
        times = np.frombuffer(fh.read(8 * n_rec), dtype="<f8")
        d = 2**n
        norms = np.frombuffer(fh.read(8 * n_traj * n_rec), dtype="<f8").reshape(n_traj, n_rec)
        raw = np.frombuffer(fh.read(16 * n_traj * n_rec * d), dtype="<f8")
        raw = raw.reshape(n_traj, n_rec, d, 2)
        states = raw[..., 0] + 1j * raw[..., 1]
    return {
        "n_qubits": int(n),
        "n_steps": int(n_steps),
        "seed": int(seed),
        "config_digest": digest,
        "record_indices": record_indices,
        "times": times,
        "norms": norms,
        "states": states,
    }


def lipschitz_report(hamiltonian: Hamiltonian, noise, n_probe: int = 32, seed: int = 0) -> dict:
    """Bounds confirming the SDE coefficients are globally Lipschitz.

    The drift and diffusion are linear in the state and time-independent, so
    their Lipschitz constants are operator norms.  A finite-difference probe
    over random state pairs cross-checks the drift bound.
    """
    A, Bs = build_sde_operators(hamiltonian, noise)
    drift_bound = float(np.linalg.svd(A, compute_uv=False)[0])
    diff_bounds = [float(np.linalg.svd(B, compute_uv=False)[0]) for B in Bs]

    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    d = A.shape[0]
    fd = 0.0
    for _ in range(n_probe):
        a = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        b = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        denom = np.linalg.norm(a - b)
        if denom > 0:
            fd = max(fd, float(np.linalg.norm(A @ a - A @ b) / denom))
    return {
        "drift_gradient_bound": drift_bound,
        "drift_finite_difference_bound": fd,
        "diffusion_gradient_bounds": diff_bounds,
        "diffusion_time_derivative_bound": 0.0,
    }
