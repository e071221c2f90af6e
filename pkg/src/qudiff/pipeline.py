"""Experiment configuration and the command layer behind the CLI.

A single JSON config (versioned by a ``schema`` field) describes the system,
the noise, the forward corruption, training, and reverse integration.  Every
command derives its randomness from the one master seed through labeled
seed splitting (see :func:`qudiff.rng.derive_seed`), writes its outputs
atomically (temp file then rename), and embeds the config digest in every
artifact, so a command rerun with the same config and seed reproduces its
metric files byte for byte.  Wall-clock timings go to a separate
``timings_*.json`` so the deterministic artifacts stay comparable.

Commands return a process exit code: 0 on success, 1 on validation problems
(bad config, missing inputs), 2 on numerical-check failures or divergence.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .estimator import ScoreDiffusionDenoiser
from .lindblad import Hamiltonian, NoiseModel, as_noise_list, integrate_master
from .qstate import (
    fidelity_pure,
    haar_state,
    real_embed,
    real_unembed,
    trace_distance,
)
from .reverse import ReverseConfig, ReverseDivergenceError, denoise, denoise_quantum
from .rng import derive_seed, keyed_generator, normal_stream
from .score import (
    OuParams,
    ScoreNet,
    TrainConfig,
    TrainingDivergedError,
    gaussian_marginal_score,
    kde_score_oracle,
    load_checkpoint,
    loss_curve_csv,
    ou_kernel,
    sample_forward,
    save_checkpoint,
    train,
)
from .unravel import (
    SdeConfig,
    SdeDivergenceError,
    build_sde_operators,
    lipschitz_report,
    simulate_ensemble,
    simulate_trajectory,
    ensemble_density,
)

__all__ = [
    "ConfigError",
    "DatasetConfig",
    "EvalConfig",
    "ExperimentConfig",
    "apply_overrides",
    "cmd_denoise_eval",
    "cmd_make_dataset",
    "cmd_oracle_check",
    "cmd_report",
    "cmd_train",
    "config_digest",
    "load_config",
    "sample_haar_embeddings",
    "write_json_atomic",
]

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class ConfigError(ValueError):
    """The configuration file or an override is invalid."""


@dataclass(frozen=True)
class DatasetConfig:
    """Dataset generation settings."""

    size: int = 1000
    corruption: str = "none"  # none | ou | quantum-literal
    corruption_time: float = 0.7

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError("dataset size must be at least 1")
        if self.corruption not in ("none", "ou", "quantum-literal"):
            raise ConfigError("dataset corruption must be none, ou or quantum-literal")
        if not np.isfinite(self.corruption_time) or self.corruption_time <= 0:
            raise ConfigError("dataset corruption_time must be positive")

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "corruption": self.corruption,
            "corruption_time": self.corruption_time,
        }


@dataclass(frozen=True)
class EvalConfig:
    """Held-out evaluation settings."""

    corrupt_time: float = 0.7
    corruption: str = "ou"  # ou | quantum-literal
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if not np.isfinite(self.corrupt_time) or self.corrupt_time <= 0:
            raise ConfigError("eval corrupt_time must be positive")
        if self.corruption not in ("ou", "quantum-literal"):
            raise ConfigError("eval corruption must be ou or quantum-literal")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie strictly between 0 and 1")

    def to_dict(self) -> dict:
        return {
            "corrupt_time": self.corrupt_time,
            "corruption": self.corruption,
            "holdout_fraction": self.holdout_fraction,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    """Full experiment description; see the package README for the schema."""

    n_qubits: int = 1
    hamiltonian: Hamiltonian = None  # filled in __post_init__ when None
    noise: tuple = (NoiseModel(gamma_d=(0.1, 0.1, 0.1), gamma_a=0.2, gamma_p=0.5),)
    sde: SdeConfig = field(default_factory=SdeConfig)
    ou: OuParams = field(default_factory=OuParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    reverse: ReverseConfig = field(default_factory=ReverseConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ensemble_size: int = 10000
    hidden_units: int = 128
    master_seed: int = 7
    threads: int = 1
    out_dir: str = "runs"

    def __post_init__(self):
        if not 1 <= self.n_qubits <= 3:
            raise ConfigError("n_qubits must be 1, 2 or 3")
        if self.hamiltonian is None:
            object.__setattr__(self, "hamiltonian", Hamiltonian.default(self.n_qubits))
        if self.hamiltonian.n_qubits != self.n_qubits:
            raise ConfigError("hamiltonian register size does not match n_qubits")
        noise = as_noise_list(self.noise)
        for m in noise:
            if m.target_qubit >= self.n_qubits:
                raise ConfigError(
                    f"noise target qubit {m.target_qubit} outside register of {self.n_qubits}"
                )
        object.__setattr__(self, "noise", noise)
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be at least 1")
        if self.hidden_units < 1:
            raise ConfigError("hidden_units must be at least 1")
        if not isinstance(self.master_seed, int) or not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.ou.t_end < self.eval.corrupt_time:
            raise ConfigError("eval corrupt_time must not exceed the forward horizon ou.t_end")

    # -- seeds ------------------------------------------------------------
    def seed_for(self, purpose: str) -> int:
        return derive_seed(self.master_seed, purpose)

    def sde_with_seed(self) -> SdeConfig:
        return dataclasses.replace(self.sde, seed=self.seed_for("forward-trajectories"))

    def train_with_seed(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed_for("score-training"))

    def reverse_with_seed(self) -> ReverseConfig:
        return dataclasses.replace(self.reverse, seed=self.seed_for("reverse-paths"))

    # -- (de)serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "n_qubits": self.n_qubits,
            "hamiltonian": self.hamiltonian.to_dict(),
            "noise": [m.to_dict() for m in self.noise],
            "sde": self.sde.to_dict(),
            "ou": self.ou.to_dict(),
            "train": self.train.to_dict(),
            "reverse": self.reverse.to_dict(),
            "dataset": self.dataset.to_dict(),
            "eval": self.eval.to_dict(),
            "ensemble_size": self.ensemble_size,
            "hidden_units": self.hidden_units,
            "master_seed": self.master_seed,
            "threads": self.threads,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        schema = raw.get("schema")
        if schema != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported config schema {schema!r}; this build reads schema {SCHEMA_VERSION}"
            )
        known = {
            "schema",
            "n_qubits",
            "hamiltonian",
            "noise",
            "sde",
            "ou",
            "train",
            "reverse",
            "dataset",
            "eval",
            "ensemble_size",
            "hidden_units",
            "master_seed",
            "threads",
            "out_dir",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        n_qubits = int(raw.get("n_qubits", 1))
        if not 1 <= n_qubits <= 3:
            raise ConfigError("n_qubits must be 1, 2 or 3")
        try:
            ham_raw = raw.get("hamiltonian", "default")
            if ham_raw == "default":
                ham = Hamiltonian.default(n_qubits)
            elif ham_raw == "zero":
                ham = Hamiltonian.zero(n_qubits)
            elif isinstance(ham_raw, dict):
                ham = Hamiltonian.from_dict({"n_qubits": n_qubits, **ham_raw})
            else:
                raise ConfigError("hamiltonian must be 'default', 'zero' or an object")
            noise_raw = raw.get(
                "noise", {"gamma_d": [0.1, 0.1, 0.1], "gamma_a": 0.2, "gamma_p": 0.5}
            )
            if isinstance(noise_raw, dict):
                noise = (NoiseModel.from_dict(noise_raw),)
            elif isinstance(noise_raw, list):
                noise = tuple(NoiseModel.from_dict(m) for m in noise_raw)
            else:
                raise ConfigError("noise must be an object or a list of objects")
            return cls(
                n_qubits=n_qubits,
                hamiltonian=ham,
                noise=noise,
                sde=SdeConfig.from_dict(raw.get("sde", {})),
                ou=OuParams.from_dict(raw.get("ou", {})),
                train=TrainConfig.from_dict(raw.get("train", {})),
                reverse=ReverseConfig.from_dict(raw.get("reverse", {})),
                dataset=DatasetConfig(**raw.get("dataset", {})),
                eval=EvalConfig(**raw.get("eval", {})),
                ensemble_size=int(raw.get("ensemble_size", 10000)),
                hidden_units=int(raw.get("hidden_units", 128)),
                master_seed=int(raw.get("master_seed", 7)),
                threads=int(raw.get("threads", 1)),
                out_dir=str(raw.get("out_dir", "runs")),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def config_digest(cfg: ExperimentConfig) -> str:
    """First 16 hex chars of SHA-256 over the canonical config JSON.

    Excludes execution-only fields (worker threads, output directory): the
    same experiment run with more workers or into another folder carries the
    same digest, and its metric files are byte-identical.
    """
    import hashlib

    doc = {k: v for k, v in cfg.to_dict().items() if k not in ("threads", "out_dir")}
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``--set dotted.key=value`` pairs to the raw config dict."""
    out = json.loads(json.dumps(raw))  # deep copy
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, _, value = item.partition("=")
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key path")
        node = out
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = _parse_override_value(value.strip())
    return out


def load_config(path, overrides=None, seed=None, out_dir=None, threads=None) -> ExperimentConfig:
    """Read, override, and validate a config file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["master_seed"] = int(seed)
    if out_dir is not None:
        raw["out_dir"] = str(out_dir)
    if threads is not None:
        raw["threads"] = int(threads)
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Atomic artifact writing


def write_bytes_atomic(path, data: bytes) -> None:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def write_json_atomic(path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_timings(out_dir: str, command: str, seconds: dict, cfg: "ExperimentConfig") -> None:
    write_json_atomic(
        os.path.join(out_dir, f"timings_{command}.json"),
        {"command": command, "config_digest": config_digest(cfg), "wall_seconds": seconds},
    )


# ---------------------------------------------------------------------------
# Shared helpers


def sample_haar_embeddings(n_states: int, n_qubits: int, seed: int) -> np.ndarray:
    """Real embeddings of ``n_states`` Haar-random pure states."""
    rng = keyed_generator(seed, 0)
    return np.stack([real_embed(haar_state(n_qubits, rng)) for _ in range(n_states)])


def _normalize_embeddings(x: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(nrm == 0):
        raise FloatingPointError("cannot renormalize a zero vector")
    return x / nrm


def split_indices(n: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffle split into (train, holdout) index arrays."""
    n_holdout = int(round(holdout_fraction * n))
    if n_holdout < 1 or n_holdout >= n:
        raise ConfigError(
            f"holdout fraction {holdout_fraction} leaves an empty split for {n} samples"
        )
    perm = keyed_generator(seed, 0).permutation(n)
    return np.sort(perm[n_holdout:]), np.sort(perm[:n_holdout])


def build_score_fn(source: str, cfg: ExperimentConfig, net: ScoreNet | None, train_clean: np.ndarray | None):
    """Resolve a score callable (x, t) -> score for the reverse integrator.

    network: the trained model.  kde: the exact mixture score of the training
    cloud pushed through the forward kernel (centers m_t x_i, bandwidth
    sigma_t).  analytic: Gaussian closed form from training-split moments.
    zero: identically zero (the score-free baseline).
    """
    if source == "network":
        if net is None:
            raise ConfigError("a trained checkpoint is required for score_source=network")
        return net.forward
    if source == "kde":
        if train_clean is None:
            raise ConfigError("a training split is required for score_source=kde")

        def kde_fn(x, t):
            m, var = ou_kernel(cfg.ou, float(t))
            return kde_score_oracle(m * train_clean, math.sqrt(var), x)

        return kde_fn
    if source == "analytic":
        if train_clean is None:
            raise ConfigError("a training split is required for score_source=analytic")
        mean = train_clean.mean(axis=0)
        var = train_clean.var(axis=0, ddof=1)

        def analytic_fn(x, t):
            return gaussian_marginal_score(x, float(t), cfg.ou, data_mean=mean, data_var=var)

        return analytic_fn
    if source == "zero":
        return lambda x, t: np.zeros_like(np.asarray(x, dtype=float))
    raise ConfigError(f"unknown score source {source!r}")


# ---------------------------------------------------------------------------
# oracle-check


def _exact_dephasing_endpoint(psi0: np.ndarray, omega: float, gamma: float, w_total: np.ndarray) -> np.ndarray:
    """Exact endpoint of the dephasing-only linear unraveling at t = 1.

    With H = (omega/2) Z and L = Z the components are geometric Brownian
    motions with imaginary diffusion, solved in closed form by the terminal
    Brownian value alone: psi_j(t) = psi_j(0) exp(-+ i omega t / 2 +- i
    sqrt(gamma) W_t).
    """
    up = psi0[0] * np.exp(-0.5j * omega + 1j * np.sqrt(gamma) * w_total)
    dn = psi0[1] * np.exp(0.5j * omega - 1j * np.sqrt(gamma) * w_total)
    return np.stack([up, dn], axis=1)


def _strong_error_check(cfg: ExperimentConfig, n_paths: int = 500) -> dict:
    """Mean endpoint error of Euler-Maruyama at the configured dt.

    Uses the dephasing-only test equation with its exact pathwise solution;
    error decays like sqrt(dt), so the 0.05 threshold passes comfortably at
    the default dt = 1e-3 and fails for coarse grids (about 0.13 at dt=0.2).
    """
    gamma = 0.5
    omega = 1.0
    psi0 = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0)
    grid = SdeConfig(
        t_end=1.0,
        dt=cfg.sde.dt,
        integrator="euler_maruyama",
        seed=cfg.seed_for("oracle-strong-error"),
    )
    ham = Hamiltonian.default(1, omega=omega)
    noise = NoiseModel(gamma_p=gamma)
    ens = simulate_ensemble(
        psi0, ham, noise, grid, n_paths,
        record_indices=(grid.n_steps,), threads=cfg.threads,
    )
    # terminal Brownian value of each path, from the same streams
    dt = grid.dt_effective
    w_total = np.array(
        [
            normal_stream(grid.seed, j, (grid.n_steps, 1)).sum() * np.sqrt(dt)
            for j in range(n_paths)
        ]
    )
    exact = _exact_dephasing_endpoint(psi0, omega, gamma, w_total)
    err = float(np.linalg.norm(ens.states[:, 0, :] - exact, axis=1).mean())
    return {
        "value": err,
        "tolerance": 0.05,
        "passed": bool(err <= 0.05),
        "detail": f"mean strong endpoint error at dt={grid.dt_effective:.3g} over {n_paths} paths",
    }


def cmd_oracle_check(cfg: ExperimentConfig, out_dir: str | None = None) -> int:
    """Self-checks against closed-form dynamics; exit 2 on any failure."""
    out_dir = out_dir or cfg.out_dir
    started = time.perf_counter()
    checks = {}

    noise_trivial = all(m.is_trivial() for m in cfg.noise)
    if noise_trivial:
        # unitary propagation only
        from scipy.linalg import expm

        psi0 = real_unembed(sample_haar_embeddings(1, cfg.n_qubits, cfg.seed_for("oracle-unitary"))[0])
        grid = SdeConfig(t_end=1.0, dt=1e-4, seed=cfg.seed_for("forward-trajectories"),
                         renormalize_each_step=True)
        traj = simulate_trajectory(psi0, cfg.hamiltonian, cfg.noise, grid, trajectory_id=0)
        exact = expm(-1j * cfg.hamiltonian.matrix() * grid.t_end) @ psi0
        fid = fidelity_pure(traj.states[-1] / np.linalg.norm(traj.states[-1]), exact)
        norm_dev = float(np.max(np.abs(traj.norms - 1.0)))
        checks["unitary_fidelity"] = {
            "value": fid,
            "tolerance": 1e-6,
            "passed": bool(fid >= 1.0 - 1e-6),
            "detail": "zero-noise trajectory vs matrix exponential at t=1, dt=1e-4",
        }
        checks["unitary_norms"] = {
            "value": norm_dev,
            "tolerance": 1e-8,
            "passed": bool(norm_dev <= 1e-8),
            "detail": "max per-step raw-norm deviation from 1",
        }
    else:
        # analytic decay rates, each on its own canonical setting at dt=1e-3
        ham = Hamiltonian.default(1)
        plus = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0)
        rho_plus = np.outer(plus, plus.conj())

        sol = integrate_master(rho_plus, ham, NoiseModel(gamma_p=0.5), 1.0, 1e-3)
        got = abs(sol.states[-1][0, 1]) / abs(rho_plus[0, 1])
        want = math.exp(-2.0 * 0.5 * 1.0)
        rel = abs(got - want) / want
        checks["master_dephasing"] = {
            "value": rel,
            "tolerance": 1e-6,
            "passed": bool(rel <= 1e-6),
            "detail": "off-diagonal decay factor vs exp(-2*gamma_p*t)",
        }

        sol = integrate_master(rho_plus, ham, NoiseModel(gamma_d=(0.1, 0.1, 0.1)), 1.0, 1e-3)
        from .qstate import bloch_vector

        got = float(np.linalg.norm(bloch_vector(sol.states[-1])))
        want = math.exp(-4.0 * 0.1 * 1.0)  # |r(0)| = 1 for a pure state
        rel = abs(got - want) / want
        checks["master_depolarization"] = {
            "value": rel,
            "tolerance": 1e-6,
            "passed": bool(rel <= 1e-6),
            "detail": "Bloch-vector decay factor vs exp(-4*gamma*t), equal axis rates",
        }

        one = np.zeros((2, 2), dtype=complex)
        one[1, 1] = 1.0
        sol = integrate_master(one, ham, NoiseModel(gamma_a=0.2), 2.0, 1e-3)
        got = sol.states[-1][1, 1].real
        want = math.exp(-0.2 * 2.0)
        rel = abs(got - want) / want
        checks["master_amplitude"] = {
            "value": rel,
            "tolerance": 1e-6,
            "passed": bool(rel <= 1e-6),
            "detail": "excited-population decay factor vs exp(-gamma_a*t)",
        }

        checks["em_strong_error"] = _strong_error_check(cfg)

        # unraveled ensemble against the deterministic master solution
        n_traj = cfg.ensemble_size
        grid = cfg.sde_with_seed()
        ens = simulate_ensemble(
            plus, cfg.hamiltonian, cfg.noise, grid, n_traj,
            record_indices=(grid.n_steps,), threads=cfg.threads,
        )
        rho_mc = ensemble_density(ens, 0)
        master = integrate_master(rho_plus, cfg.hamiltonian, cfg.noise, grid.t_end, min(grid.dt, 1e-3))
        td = trace_distance(rho_mc, master.states[-1])
        tol = 3.0 / math.sqrt(n_traj) + 0.004  # sampling error plus O(dt) weak bias
        checks["ensemble_vs_master"] = {
            "value": td,
            "tolerance": tol,
            "passed": bool(td <= tol),
            "detail": f"trace distance at t={grid.t_end} over {n_traj} trajectories",
        }

    lip = lipschitz_report(cfg.hamiltonian, cfg.noise)
    finite = all(
        np.isfinite(v).all() if isinstance(v, (list, np.ndarray)) else np.isfinite(v)
        for v in lip.values()
    )
    checks["lipschitz_bounds_finite"] = {
        "value": lip["drift_gradient_bound"],
        "tolerance": None,
        "passed": bool(finite),
        "detail": "drift/diffusion Lipschitz bounds are finite",
    }

    passed = all(c["passed"] for c in checks.values())
    report = {
        "kind": "oracle-check",
        "config_digest": config_digest(cfg),
        "master_seed": cfg.master_seed,
        "checks": checks,
        "lipschitz": lip,
        "passed": passed,
    }
    write_json_atomic(os.path.join(out_dir, "oracle_report.json"), report)
    _write_timings(out_dir, "oracle-check", {"total": time.perf_counter() - started}, cfg)
    for name, c in checks.items():
        status = "pass" if c["passed"] else "FAIL"
        tol = c["tolerance"]
        tol_text = f" (tol {tol:g})" if tol is not None else ""
        print(f"[oracle-check] {name}: {status} value={c['value']:.3g}{tol_text}")
    return EXIT_OK if passed else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# make-dataset


def cmd_make_dataset(cfg: ExperimentConfig, out_dir: str | None = None) -> int:
    """Sample Haar states, optionally corrupt them, and store embeddings."""
    out_dir = out_dir or cfg.out_dir
    started = time.perf_counter()
    seed = cfg.seed_for("dataset-haar")
    clean = sample_haar_embeddings(cfg.dataset.size, cfg.n_qubits, seed)

    corrupted = None
    if cfg.dataset.corruption == "ou":
        rng = keyed_generator(cfg.seed_for("dataset-corrupt"), 0)
        corrupted = sample_forward(clean, cfg.dataset.corruption_time, cfg.ou, rng)
    elif cfg.dataset.corruption == "quantum-literal":
        grid = SdeConfig(
            t_end=cfg.dataset.corruption_time,
            dt=min(cfg.sde.dt, cfg.dataset.corruption_time / 10.0),
            integrator=cfg.sde.integrator,
            seed=cfg.seed_for("dataset-corrupt"),
        )
        rows = []
        for i in range(cfg.dataset.size):
            traj = simulate_trajectory(
                real_unembed(clean[i]), cfg.hamiltonian, cfg.noise, grid, trajectory_id=i
            )
            final = traj.states[-1]
            rows.append(real_embed(final / np.linalg.norm(final)))
        corrupted = np.stack(rows)

    payload = {
        "schema": SCHEMA_VERSION,
        "kind": "dataset",
        "config_digest": config_digest(cfg),
        "n_qubits": cfg.n_qubits,
        "size": cfg.dataset.size,
        "seed": seed,
        "corruption": cfg.dataset.corruption,
        "corruption_time": (
            cfg.dataset.corruption_time if cfg.dataset.corruption != "none" else None
        ),
        "clean": [[float(v) for v in row] for row in clean],
        "corrupted": (
            None if corrupted is None else [[float(v) for v in row] for row in corrupted]
        ),
    }
    write_json_atomic(os.path.join(out_dir, "dataset.json"), payload)
    _write_timings(out_dir, "make-dataset", {"total": time.perf_counter() - started}, cfg)
    print(
        f"[make-dataset] wrote {cfg.dataset.size} states "
        f"(corruption={cfg.dataset.corruption}) to {os.path.join(out_dir, 'dataset.json')}"
    )
    return EXIT_OK


def load_dataset(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"dataset file is not valid JSON: {exc}") from exc
    if data.get("kind") != "dataset" or data.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"{path} is not a schema-{SCHEMA_VERSION} dataset file")
    data["clean"] = np.asarray(data["clean"], dtype=float)
    if data.get("corrupted") is not None:
        data["corrupted"] = np.asarray(data["corrupted"], dtype=float)
    return data


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: ExperimentConfig, out_dir: str | None = None, dataset_path: str | None = None) -> int:
    """Fit the score network on the training split of a dataset."""
    out_dir = out_dir or cfg.out_dir
    dataset_path = dataset_path or os.path.join(out_dir, "dataset.json")
    started = time.perf_counter()
    data = load_dataset(dataset_path)
    clean = data["clean"]
    train_idx, holdout_idx = split_indices(
        clean.shape[0], cfg.eval.holdout_fraction, cfg.seed_for("train-holdout-split")
    )
    x_train = clean[train_idx]

    net = ScoreNet(
        dim=clean.shape[1],
        hidden=cfg.hidden_units,
        t_scale=cfg.ou.t_end,
        seed=cfg.seed_for("score-init"),
    )
    tcfg = cfg.train_with_seed()
    try:
        result = train(net, x_train, cfg.ou, tcfg)
    except TrainingDivergedError as exc:
        print(f"[train] {exc}")
        return EXIT_NUMERICAL

    digest = config_digest(cfg)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.qsck")
    tmp = f"{ckpt_path}.tmp.{os.getpid()}"
    save_checkpoint(
        net,
        tmp,
        metadata={
            "config_digest": digest,
            "dataset_digest": data["config_digest"],
            "train_seed": tcfg.seed,
            "steps": tcfg.steps,
            "n_train": int(train_idx.size),
        },
    )
    os.replace(tmp, ckpt_path)
    loss_path = os.path.join(out_dir, "loss.csv")
    tmp = f"{loss_path}.tmp.{os.getpid()}"
    loss_curve_csv(result, tmp)
    os.replace(tmp, loss_path)
    metrics = {
        "kind": "train",
        "config_digest": digest,
        "dataset_digest": data["config_digest"],
        "n_train": int(train_idx.size),
        "n_holdout": int(holdout_idx.size),
        "steps": tcfg.steps,
        "initial_loss": float(result.loss[0]) if tcfg.steps else None,
        "final_loss": float(result.loss[-1]) if tcfg.steps else None,
        "final_smoothed_loss": result.final_smoothed if tcfg.steps else None,
    }
    write_json_atomic(os.path.join(out_dir, "train_metrics.json"), metrics)
    _write_timings(out_dir, "train", {"total": time.perf_counter() - started}, cfg)
    if tcfg.steps:
        print(
            f"[train] {tcfg.steps} steps on {train_idx.size} states; "
            f"loss {metrics['initial_loss']:.4f} -> smoothed {metrics['final_smoothed_loss']:.4f}"
        )
    else:
        print(f"[train] wrote an untrained (zero-score) checkpoint for {train_idx.size} states")
    return EXIT_OK


# ---------------------------------------------------------------------------
# denoise-eval


def _sign_test(improvements: np.ndarray) -> dict:
    pos = int(np.sum(improvements > 0))
    neg = int(np.sum(improvements < 0))
    ties = int(improvements.size - pos - neg)
    n = pos + neg
    p_value = float(binomtest(pos, n, 0.5, alternative="greater").pvalue) if n else 1.0
    return {"n_positive": pos, "n_negative": neg, "n_zero": ties, "p_value_positive": p_value}


def _paired_margin(a: np.ndarray, b: np.ndarray) -> dict:
    diff = a - b
    mean = float(diff.mean())
    se = float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0
    return {"mean": mean, "se": se, "z": (mean / se) if se > 0 else 0.0}


def cmd_denoise_eval(
    cfg: ExperimentConfig,
    out_dir: str | None = None,
    dataset_path: str | None = None,
    checkpoint_path: str | None = None,
) -> int:
    """Corrupt held-out states, denoise them, and report paired fidelities."""
    out_dir = out_dir or cfg.out_dir
    dataset_path = dataset_path or os.path.join(out_dir, "dataset.json")
    started = time.perf_counter()
    data = load_dataset(dataset_path)
    clean = data["clean"]
    if data["n_qubits"] != cfg.n_qubits:
        raise ConfigError("dataset register size does not match the config")
    train_idx, holdout_idx = split_indices(
        clean.shape[0], cfg.eval.holdout_fraction, cfg.seed_for("train-holdout-split")
    )
    x_train = clean[train_idx]
    x_clean = clean[holdout_idx]
    if x_clean.shape[0] < 2:
        raise ConfigError("held-out split has fewer than 2 states")

    net = None
    checkpoint_meta = {}
    if cfg.reverse.score_source == "network":
        checkpoint_path = checkpoint_path or os.path.join(out_dir, "checkpoint.qsck")
        try:
            net, checkpoint_meta = load_checkpoint(checkpoint_path)
        except FileNotFoundError as exc:
            raise ConfigError(f"checkpoint file not found: {checkpoint_path}") from exc
        if net.dim != clean.shape[1]:
            raise ConfigError("checkpoint dimension does not match the dataset")

    t_corrupt = cfg.eval.corrupt_time
    psi_clean = [real_unembed(row) for row in x_clean]

    # corrupt
    if cfg.eval.corruption == "ou":
        rng = keyed_generator(cfg.seed_for("eval-corruption"), 0)
        x_noisy_raw = sample_forward(x_clean, t_corrupt, cfg.ou, rng)
    else:  # quantum-literal forward corruption
        grid = SdeConfig(
            t_end=t_corrupt,
            dt=min(cfg.sde.dt, t_corrupt / 10.0),
            integrator=cfg.sde.integrator,
            seed=cfg.seed_for("eval-corruption"),
        )
        rows = []
        for i, psi in enumerate(psi_clean):
            traj = simulate_trajectory(psi, cfg.hamiltonian, cfg.noise, grid, trajectory_id=i)
            rows.append(real_embed(traj.states[-1]))
        x_noisy_raw = np.stack(rows)
    x_noisy = _normalize_embeddings(x_noisy_raw)
    psi_noisy = [real_unembed(row) for row in x_noisy]

    score_fn = build_score_fn(cfg.reverse.score_source, cfg, net, x_train)
    zero_fn = build_score_fn("zero", cfg, None, None)
    rcfg = cfg.reverse_with_seed()
    baseline_cfg = dataclasses.replace(rcfg, noise="drift-only")

    try:
        if rcfg.mode == "ou":
            denoised = denoise(x_noisy_raw, t_corrupt, rcfg, score_fn, cfg.ou).x0
            baseline = denoise(x_noisy_raw, t_corrupt, baseline_cfg, zero_fn, cfg.ou).x0
            psi_denoised = [real_unembed(r) for r in _normalize_embeddings(denoised)]
            psi_baseline = [real_unembed(r) for r in _normalize_embeddings(baseline)]
        else:
            res = denoise_quantum(
                np.stack(psi_noisy), t_corrupt, rcfg, score_fn, cfg.hamiltonian, cfg.noise
            )
            base = denoise_quantum(
                np.stack(psi_noisy), t_corrupt, baseline_cfg, zero_fn, cfg.hamiltonian, cfg.noise
            )
            psi_denoised = [real_unembed(r) for r in res.x0]
            psi_baseline = [real_unembed(r) for r in base.x0]
    except ReverseDivergenceError as exc:
        print(f"[denoise-eval] {exc}")
        return EXIT_NUMERICAL

    f_noisy = np.array([fidelity_pure(a, b) for a, b in zip(psi_clean, psi_noisy)])
    f_denoised = np.array([fidelity_pure(a, b) for a, b in zip(psi_clean, psi_denoised)])
    f_baseline = np.array([fidelity_pure(a, b) for a, b in zip(psi_clean, psi_baseline)])
    improvement = f_denoised - f_noisy

    digest = config_digest(cfg)
    lines = []
    for k in range(x_clean.shape[0]):
        lines.append(
            json.dumps(
                {
                    "index": int(holdout_idx[k]),
                    "noisy_fidelity": float(f_noisy[k]),
                    "denoised_fidelity": float(f_denoised[k]),
                    "baseline_fidelity": float(f_baseline[k]),
                    "improvement": float(improvement[k]),
                },
                sort_keys=True,
            )
        )
    write_text_atomic(os.path.join(out_dir, "eval_per_state.jsonl"), "\n".join(lines) + "\n")

    metrics = {
        "kind": "denoise-eval",
        "config_digest": digest,
        "dataset_digest": data["config_digest"],
        "checkpoint_meta": checkpoint_meta,
        "score_source": cfg.reverse.score_source,
        "mode": cfg.reverse.mode,
        "corrupt_time": t_corrupt,
        "n_states": int(x_clean.shape[0]),
        "mean_noisy_fidelity": float(f_noisy.mean()),
        "median_noisy_fidelity": float(np.median(f_noisy)),
        "mean_denoised_fidelity": float(f_denoised.mean()),
        "median_denoised_fidelity": float(np.median(f_denoised)),
        "mean_baseline_fidelity": float(f_baseline.mean()),
        "mean_improvement": float(improvement.mean()),
        "median_improvement": float(np.median(improvement)),
        "sign_test": _sign_test(improvement),
        "net_vs_baseline": _paired_margin(f_denoised, f_baseline),
    }
    write_json_atomic(os.path.join(out_dir, "eval_metrics.json"), metrics)
    _write_timings(out_dir, "denoise-eval", {"total": time.perf_counter() - started}, cfg)
    print(
        f"[denoise-eval] {metrics['n_states']} states: "
        f"noisy {metrics['mean_noisy_fidelity']:.4f} -> denoised {metrics['mean_denoised_fidelity']:.4f} "
        f"(improvement {metrics['mean_improvement']:+.4f}, "
        f"sign-test p={metrics['sign_test']['p_value_positive']:.3g})"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


_REPORT_FILES = ("oracle_report.json", "train_metrics.json", "eval_metrics.json")


def cmd_report(cfg: ExperimentConfig, out_dir: str | None = None, force: bool = False) -> int:
    """Aggregate metric files under ``out_dir`` (one run per subdirectory).

    Files in ``out_dir`` itself count as the run named ".".  Refuses to mix
    runs with different config digests unless ``force``.
    """
    out_dir = out_dir or cfg.out_dir
    runs = {}
    candidates = ["."] + sorted(
        d for d in (os.listdir(out_dir) if os.path.isdir(out_dir) else [])
        if os.path.isdir(os.path.join(out_dir, d))
    )
    for run in candidates:
        found = {}
        for fname in _REPORT_FILES:
            path = os.path.join(out_dir, run, fname)
            if os.path.isfile(path):
                with open(path) as fh:
                    found[fname] = json.load(fh)
        if found:
            runs[run] = found
    if not runs:
        print(f"[report] no runs found under {out_dir}")
        return EXIT_VALIDATION

    digests = sorted(
        {doc.get("config_digest", "?") for docs in runs.values() for doc in docs.values()}
    )
    if len(digests) > 1 and not force:
        print(
            f"[report] refusing to aggregate runs with mismatched config digests {digests}; "
            "pass --force to override"
        )
        return EXIT_VALIDATION

    header = [
        "run_id",
        "oracle_passed",
        "final_smoothed_loss",
        "mean_noisy_fidelity",
        "mean_denoised_fidelity",
        "mean_improvement",
        "sign_test_p",
    ]
    rows = []
    for run in sorted(runs):
        docs = runs[run]
        oracle = docs.get("oracle_report.json", {})
        tr = docs.get("train_metrics.json", {})
        ev = docs.get("eval_metrics.json", {})
        rows.append(
            [
                run,
                oracle.get("passed", ""),
                tr.get("final_smoothed_loss", ""),
                ev.get("mean_noisy_fidelity", ""),
                ev.get("mean_denoised_fidelity", ""),
                ev.get("mean_improvement", ""),
                (ev.get("sign_test") or {}).get("p_value_positive", ""),
            ]
        )

    widths = [max(len(str(h)), max((len(str(r[i])) for r in rows), default=0)) for i, h in enumerate(header)]
    table = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        table.append("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
    text = "\n".join(table)
    print(text)

    report_dir = os.path.join(out_dir, "report")
    csv_lines = [",".join(header)]
    for r in rows:
        csv_lines.append(",".join("" if v == "" else str(v) for v in r))
    write_text_atomic(os.path.join(report_dir, "report.csv"), "\n".join(csv_lines) + "\n")
    write_text_atomic(os.path.join(report_dir, "report.txt"), text + "\n")
    return EXIT_OK
