"""Reverse-time integration: denoising by running diffusion backwards.

A forward diffusion dX = f(X, t) dt + g(t) dW run on [0, T] has a
time-reversal that, in the forward-running reversed clock s = T - t, reads

    dX = [ -f(X, T - s) + g(T - s)^2 grad log p_{T-s}(X) ] ds + g(T - s) dW.

For the Ornstein-Uhlenbeck corruption (f = -alpha x, g = sqrt(2) beta) the
step is x' = x + [alpha x + 2 beta^2 s(x, t)] ds + sqrt(2 ds) beta xi.

The quantum variant applies the same recipe to the real embedding of a state
vector: drift is the embedded unraveling drift, the diffusion matrix is
D = G G^T with G the embedded diffusion columns frozen at the current state,
and the state is renormalized after every step.

Paths are deterministic given (config.seed, path index): path ``j`` draws
its Gaussians from the Philox stream keyed by (seed, j), independent of
batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lindblad import Hamiltonian
from .qstate import num_qubits
from .rng import normal_stream
from .score import OuParams
from .unravel import build_sde_operators

__all__ = [
    "DenoiseResult",
    "ReverseConfig",
    "ReverseDivergenceError",
    "denoise",
    "denoise_quantum",
    "diffusion_matrix",
    "quantum_reverse_step",
    "reverse_general_step",
    "reverse_ou_step",
]

_SCORE_SOURCES = ("network", "kde", "analytic")
_MODES = ("ou", "quantum-literal")
_NOISE_MODES = ("stochastic", "drift-only")

_DIVERGENCE_RADIUS = 1e3


class ReverseDivergenceError(RuntimeError):
    """A reverse path left the trust region or went non-finite."""

    def __init__(self, step: int, s: float, radius: float):
        self.step = step
        self.s = s
        super().__init__(
            f"reverse integration diverged at step {step} (s={s:.6g}, max |x| ~ {radius:.3g})"
        )


@dataclass(frozen=True)
class ReverseConfig:
    """Reverse-integration settings.

    ``score_source`` names how the score callable was built (trained network,
    sample-cloud KDE, or closed-form Gaussian); the integrator itself only
    sees a callable.  ``noise`` selects the stochastic sampler or the
    deterministic drift-only flow.
    """

    steps: int = 200
    score_source: str = "network"
    mode: str = "ou"
    noise: str = "stochastic"
    t_min: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.score_source not in _SCORE_SOURCES:
            raise ValueError(f"score_source must be one of {_SCORE_SOURCES}")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if self.noise not in _NOISE_MODES:
            raise ValueError(f"noise must be one of {_NOISE_MODES}")
        if not np.isfinite(self.t_min) or self.t_min <= 0:
            raise ValueError("t_min must be positive")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "score_source": self.score_source,
            "mode": self.mode,
            "noise": self.noise,
            "t_min": self.t_min,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReverseConfig":
        return cls(
            steps=int(data.get("steps", 200)),
            score_source=str(data.get("score_source", "network")),
            mode=str(data.get("mode", "ou")),
            noise=str(data.get("noise", "stochastic")),
            t_min=float(data.get("t_min", 1e-3)),
            seed=int(data.get("seed", 0)),
        )


def reverse_ou_step(x, t: float, ds: float, params: OuParams, score_fn, xi=None) -> np.ndarray:
    """One reversed-clock Euler step of the OU reversal at physical time t.

    x' = x + [alpha x + 2 beta^2 score(x, t)] ds + sqrt(2 ds) beta xi.
    ``xi`` is a standard-normal array matching x (or None for the
    deterministic drift-only variant).
    """
    x = np.asarray(x, dtype=float)
    if not np.isfinite(t) or t <= 0:
        raise ValueError("reverse steps must stay at strictly positive physical time")
    if not np.isfinite(ds) or ds <= 0:
        raise ValueError("ds must be positive")
    s_val = np.asarray(score_fn(x, t), dtype=float)
    out = x + (params.alpha * x + 2.0 * params.beta**2 * s_val) * ds
    if xi is not None:
        out = out + np.sqrt(2.0 * ds) * params.beta * np.asarray(xi, dtype=float)
    return out


def reverse_general_step(x, t: float, ds: float, drift_fn, diffusion_fn, score_fn, xi=None) -> np.ndarray:
    """Reversed-clock Euler step for a generic forward pair (f, g).

    x' = x + [-f(x, t) + g(t)^2 score(x, t)] ds + g(t) sqrt(ds) xi.
    Instantiated with the OU pair it coincides with :func:`reverse_ou_step`.
    """
    x = np.asarray(x, dtype=float)
    if not np.isfinite(ds) or ds <= 0:
        raise ValueError("ds must be positive")
    g = float(diffusion_fn(t))
    s_val = np.asarray(score_fn(x, t), dtype=float)
    out = x + (-np.asarray(drift_fn(x, t), dtype=float) + g * g * s_val) * ds
    if xi is not None:
        out = out + g * np.sqrt(ds) * np.asarray(xi, dtype=float)
    return out


def _embed_batch(psi: np.ndarray) -> np.ndarray:
    return np.concatenate([psi.real, psi.imag], axis=-1)


def _unembed_batch(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1] // 2
    return x[..., :d] + 1j * x[..., d:]


def diffusion_matrix(psi, hamiltonian: Hamiltonian, noise) -> np.ndarray:
    """D = G G^T in the real embedding, with G the embedded columns B_n psi.

    Positive semidefinite by construction; shape (2d, 2d) for one state.
    """
    psi = np.asarray(psi, dtype=complex)
    _, Bs = build_sde_operators(hamiltonian, noise)
    d = psi.shape[0]
    if not Bs:
        return np.zeros((2 * d, 2 * d))
    cols = np.stack([_embed_batch(B @ psi) for B in Bs], axis=1)  # (2d, K)
    return cols @ cols.T


def quantum_reverse_step(
    psi,
    t: float,
    ds: float,
    hamiltonian: Hamiltonian,
    noise,
    score_fn,
    xi=None,
    operators=None,
) -> np.ndarray:
    """One reversed-clock step of the embedded quantum SDE, then renormalize.

    In the embedding x of psi: x' = x - [f_emb - D score(x, t)] ds
    + G xi sqrt(ds), with f_emb the embedded drift A psi, G the embedded
    diffusion columns at the current state, and D = G G^T.  ``xi`` has one
    standard normal per channel.  Accepts a single state or a (B, d) batch.
    ``operators`` may carry a prebuilt (A, Bs) pair to avoid rebuilding.
    """
    psi = np.asarray(psi, dtype=complex)
    squeeze = psi.ndim == 1
    if squeeze:
        psi = psi[None, :]
    if not np.isfinite(ds) or ds <= 0:
        raise ValueError("ds must be positive")
    A, Bs = operators if operators is not None else build_sde_operators(hamiltonian, noise)

    x = _embed_batch(psi)                       # (B, 2d)
    f_emb = _embed_batch(psi @ A.T)             # embedded drift
    s_val = np.asarray(score_fn(x, t), dtype=float)
    if s_val.shape != x.shape:
        raise ValueError("score callable must return one vector per state")

    if Bs:
        cols = np.stack([_embed_batch(psi @ B.T) for B in Bs], axis=2)  # (B, 2d, K)
        d_score = np.einsum("bik,bk->bi", cols, np.einsum("bjk,bj->bk", cols, s_val))
    else:
        d_score = np.zeros_like(x)

    out = x + (-f_emb + d_score) * ds
    if xi is not None and Bs:
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 1:
            xi = xi[None, :]
        out = out + np.sqrt(ds) * np.einsum("bik,bk->bi", cols, xi)

    psi_out = _unembed_batch(out)
    nrm = np.linalg.norm(psi_out, axis=1, keepdims=True)
    if np.any(nrm == 0) or not np.all(np.isfinite(nrm)):
        raise FloatingPointError("reverse step produced a degenerate state")
    psi_out = psi_out / nrm
    return psi_out[0] if squeeze else psi_out


@dataclass(frozen=True)
class DenoiseResult:
    """Terminal estimates plus the whole reverse path for diagnostics."""

    x0: np.ndarray          # (B, d) terminal estimates at t = t_min
    path: np.ndarray        # (steps + 1, B, d) states along the reversed clock
    times: np.ndarray       # physical times, from t_start down to t_min


def denoise(x_start, t_start: float, config: ReverseConfig, score_fn, params: OuParams) -> DenoiseResult:
    """Integrate the OU reversal from physical time ``t_start`` down to t_min.

    ``x_start`` is one vector or a (B, d) batch of corrupted points; the
    score callable receives the full batch and the current physical time.
    Path ``j`` draws noise from the stream keyed by (config.seed, j).
    """
    if config.mode != "ou":
        raise ValueError("denoise integrates the OU reversal; use denoise_quantum for states")
    x = np.asarray(x_start, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if not np.isfinite(t_start) or t_start <= config.t_min:
        raise ValueError("t_start must exceed the stop time t_min")
    batch, dim = x.shape
    steps = config.steps
    ds = (t_start - config.t_min) / steps

    stochastic = config.noise == "stochastic"
    if stochastic:
        xi_all = np.stack(
            [normal_stream(config.seed, j, (steps, dim)) for j in range(batch)], axis=1
        )  # (steps, B, d)

    path = np.empty((steps + 1, batch, dim))
    path[0] = x
    times = t_start - ds * np.arange(steps + 1)
    times[-1] = config.t_min
    for k in range(steps):
        t = float(times[k])
        xi = xi_all[k] if stochastic else None
        x = reverse_ou_step(x, t, ds, params, score_fn, xi)
        radius = float(np.max(np.abs(x)))
        if not np.isfinite(radius) or radius > _DIVERGENCE_RADIUS:
            raise ReverseDivergenceError(step=k + 1, s=(k + 1) * ds, radius=radius)
        path[k + 1] = x
    return DenoiseResult(
        x0=path[-1][0] if squeeze else path[-1],
        path=path,
        times=times,
    )


def denoise_quantum(
    psi_start,
    t_start: float,
    config: ReverseConfig,
    score_fn,
    hamiltonian: Hamiltonian,
    noise,
) -> DenoiseResult:
    """Reverse the embedded quantum SDE from ``t_start`` down to t_min.

    States are renormalized after every step; the recorded path holds the
    real embeddings of the normalized states.
    """
    if config.mode != "quantum-literal":
        raise ValueError("denoise_quantum requires mode 'quantum-literal'")
    psi = np.asarray(psi_start, dtype=complex)
    squeeze = psi.ndim == 1
    if squeeze:
        psi = psi[None, :]
    n = num_qubits(psi.shape[1])
    if hamiltonian.n_qubits != n:
        raise ValueError("Hamiltonian register size does not match the states")
    if not np.isfinite(t_start) or t_start <= config.t_min:
        raise ValueError("t_start must exceed the stop time t_min")
    operators = build_sde_operators(hamiltonian, noise)
    n_channels = len(operators[1])
    batch = psi.shape[0]
    steps = config.steps
    ds = (t_start - config.t_min) / steps

    stochastic = config.noise == "stochastic" and n_channels > 0
    if stochastic:
        xi_all = np.stack(
            [normal_stream(config.seed, j, (steps, n_channels)) for j in range(batch)],
            axis=1,
        )

    path = np.empty((steps + 1, batch, 2 * psi.shape[1]))
    path[0] = _embed_batch(psi)
    times = t_start - ds * np.arange(steps + 1)
    times[-1] = config.t_min
    for k in range(steps):
        t = float(times[k])
        xi = xi_all[k] if stochastic else None
        psi = quantum_reverse_step(
            psi, t, ds, hamiltonian, noise, score_fn, xi, operators=operators
        )
        emb = _embed_batch(psi)
        radius = float(np.max(np.abs(emb)))
        if not np.isfinite(radius) or radius > _DIVERGENCE_RADIUS:
            raise ReverseDivergenceError(step=k + 1, s=(k + 1) * ds, radius=radius)
        path[k + 1] = emb
    return DenoiseResult(
        x0=path[-1][0] if squeeze else path[-1],
        path=path,
        times=times,
    )
