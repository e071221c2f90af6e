"""Scikit-learn style wrapper around score training and reverse denoising.

``ScoreDiffusionDenoiser.fit(X)`` learns a score model of the clean sample
cloud ``X``; ``transform(X_noisy)`` runs the stochastic reverse integration
from the corruption time back to t_min, returning denoised vectors of the
same shape.  The estimator plays by the usual rules: constructor arguments
are stored untouched, ``get_params``/``set_params``/``clone`` work, fitted
state lives in trailing-underscore attributes, and transform before fit
raises ``NotFittedError``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .rng import derive_seed
from .reverse import ReverseConfig, denoise
from .score import OuParams, ScoreNet, TrainConfig, train

__all__ = ["ScoreDiffusionDenoiser"]


class ScoreDiffusionDenoiser(TransformerMixin, BaseEstimator):
    """Denoise vectors corrupted by an Ornstein-Uhlenbeck forward process.

    Parameters
    ----------
    alpha, beta : float
        OU rate and noise scale of the corruption process.
    t_end : float
        Forward horizon the score model is trained over.
    corruption_time : float or None
        Physical time the inputs of ``transform`` are assumed to be corrupted
        to; defaults to ``t_end``.
    hidden_units : int
        Width of both hidden layers of the score network.
    train_steps, batch_size, learning_rate, optimizer, weighting, t_min :
        Training-loop settings; see ``TrainConfig``.
    reverse_steps : int
        Euler steps of the reverse integration.
    reverse_noise : str
        "stochastic" for the sampling reversal, "drift-only" for the
        deterministic flow.
    random_state : int
        Master seed; training and reverse noise use seeds derived from it.
    """

    def __init__(
        self,
        alpha: float = 1.0,
        beta: float = 1.0,
        t_end: float = 1.0,
        corruption_time: float | None = None,
        hidden_units: int = 128,
        train_steps: int = 5000,
        batch_size: int = 128,
        learning_rate: float = 1e-3,
        optimizer: str = "adam",
        weighting: str = "sigma2",
        t_min: float = 1e-3,
        reverse_steps: int = 200,
        reverse_noise: str = "stochastic",
        random_state: int = 0,
    ):
        self.alpha = alpha
        self.beta = beta
        self.t_end = t_end
        self.corruption_time = corruption_time
        self.hidden_units = hidden_units
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.weighting = weighting
        self.t_min = t_min
        self.reverse_steps = reverse_steps
        self.reverse_noise = reverse_noise
        self.random_state = random_state

    def _ou(self) -> OuParams:
        return OuParams(alpha=self.alpha, beta=self.beta, t_end=self.t_end)

    def fit(self, X, y=None):
        """Learn the score of the clean sample cloud ``X`` of shape (M, d)."""
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        ou = self._ou()
        cfg = TrainConfig(
            steps=self.train_steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            weighting=self.weighting,
            t_min=self.t_min,
            seed=derive_seed(int(self.random_state), "estimator-train"),
        )
        net = ScoreNet(
            dim=X.shape[1],
            hidden=self.hidden_units,
            t_scale=ou.t_end,
            seed=derive_seed(int(self.random_state), "estimator-init"),
        )
        result = train(net, X, ou, cfg)
        self.net_ = net
        self.loss_curve_ = result.loss
        self.smoothed_loss_ = result.smoothed
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        """Denoise corrupted vectors by reverse integration."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"transform saw {X.shape[1]} features, fit saw {self.n_features_in_}"
            )
        t_start = self.t_end if self.corruption_time is None else self.corruption_time
        cfg = ReverseConfig(
            steps=self.reverse_steps,
            score_source="network",
            mode="ou",
            noise=self.reverse_noise,
            t_min=self.t_min,
            seed=derive_seed(int(self.random_state), "estimator-reverse"),
        )
        result = denoise(X, float(t_start), cfg, self.net_.forward, self._ou())
        return result.x0

    def corrupt(self, X, t: float | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
        """Exact forward draw of ``X`` at time ``t`` (default corruption time)."""
        from .score import sample_forward

        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if t is None:
            t = self.t_end if self.corruption_time is None else self.corruption_time
        if rng is None:
            rng = np.random.Generator(
                np.random.Philox(
                    key=np.array(
                        [derive_seed(int(self.random_state), "estimator-corrupt"), 0],
                        dtype=np.uint64,
                    )
                )
            )
        return sample_forward(X, float(t), self._ou(), rng)

    def score_function(self, X, t: float) -> np.ndarray:
        """Evaluate the learned score field at time ``t``."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        return self.net_.forward(X, float(t))
