"""qudiff: noisy-qubit simulation and score-based state denoising.

The package has two halves.  The physics half models small registers (1-3
qubits) with a Lindblad master equation and its linear stochastic unraveling
over state vectors.  The learning half corrupts state embeddings with an
Ornstein-Uhlenbeck process, fits a score network by denoising score matching,
and integrates the reverse-time equation to recover clean states.
"""

from .estimator import ScoreDiffusionDenoiser
from .lindblad import (
    Hamiltonian,
    MasterSolution,
    NoiseModel,
    integrate_master,
    lindblad_rhs,
)
from .qstate import (
    bloch_vector,
    fidelity_pure,
    haar_state,
    pure_density,
    real_embed,
    real_unembed,
    trace_distance,
)
from .reverse import (
    DenoiseResult,
    ReverseConfig,
    denoise,
    denoise_quantum,
    reverse_ou_step,
)
from .rng import derive_seed, keyed_generator
from .score import (
    OuParams,
    ScoreNet,
    TrainConfig,
    TrainResult,
    conditional_score,
    gaussian_marginal_score,
    kde_score_oracle,
    load_checkpoint,
    ou_kernel,
    sample_forward,
    save_checkpoint,
    train,
)
from .unravel import (
    Ensemble,
    SdeConfig,
    Trajectory,
    ensemble_density,
    simulate_ensemble,
    simulate_trajectory,
)

__version__ = "0.1.0"

__all__ = [
    "DenoiseResult",
    "Ensemble",
    "Hamiltonian",
    "MasterSolution",
    "NoiseModel",
    "OuParams",
    "ReverseConfig",
    "ScoreDiffusionDenoiser",
    "ScoreNet",
    "SdeConfig",
    "TrainConfig",
    "TrainResult",
    "Trajectory",
    "__version__",
    "bloch_vector",
    "conditional_score",
    "denoise",
    "denoise_quantum",
    "derive_seed",
    "ensemble_density",
    "fidelity_pure",
    "gaussian_marginal_score",
    "haar_state",
    "integrate_master",
    "kde_score_oracle",
    "keyed_generator",
    "lindblad_rhs",
    "load_checkpoint",
    "ou_kernel",
    "pure_density",
    "real_embed",
    "real_unembed",
    "reverse_ou_step",
    "sample_forward",
    "save_checkpoint",
    "simulate_ensemble",
    "simulate_trajectory",
    "trace_distance",
    "train",
]
