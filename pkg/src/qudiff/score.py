"""Forward noising process and score-model training.

The corruption process is the Ornstein-Uhlenbeck SDE

    dX = -alpha X dt + sqrt(2) beta dW

whose transition kernel is Gaussian with mean factor m_t = exp(-alpha t) and
per-coordinate variance sigma_t^2 = (beta^2 / alpha)(1 - exp(-2 alpha t));
as t grows the law converges to the N(0, beta^2/alpha) prior.

A small tanh network s(x, t) is fit by denoising score matching: sample a
clean point x0, a time t uniform on (t_min, t_end], the exact forward draw
x_t, and regress on the conditional score -(x_t - m_t x0) / sigma_t^2 under
the weight lambda(t).  With lambda = sigma_t^2 (the default) the weighted
regression target is bounded, and the population minimizer is the marginal
score of the corrupted data at every time.

Gradients are exact reverse-mode, written out by hand for the fixed
two-hidden-layer architecture, and are validated against central finite
differences in the test suite.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from .rng import keyed_generator

__all__ = [
    "OuParams",
    "ScoreNet",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "conditional_score",
    "gaussian_marginal_score",
    "kde_score_oracle",
    "load_checkpoint",
    "loss_curve_csv",
    "ou_kernel",
    "sample_forward",
    "save_checkpoint",
    "silverman_bandwidth",
    "train",
]

_TRAIN_STREAM = 0xD5_00_00_01  # fixed stream id for the training loop


@dataclass(frozen=True)
class OuParams:
    """Ornstein-Uhlenbeck rate alpha, noise scale beta, horizon t_end."""

    alpha: float = 1.0
    beta: float = 1.0
    t_end: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "t_end"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive and finite")
            object.__setattr__(self, name, v)

    @property
    def stationary_variance(self) -> float:
        return self.beta**2 / self.alpha

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "t_end": self.t_end}

    @classmethod
    def from_dict(cls, data: dict) -> "OuParams":
        return cls(
            alpha=float(data.get("alpha", 1.0)),
            beta=float(data.get("beta", 1.0)),
            t_end=float(data.get("t_end", 1.0)),
        )


def ou_kernel(params: OuParams, t):
    """Mean factor m_t and per-coordinate variance sigma_t^2 of the kernel.

    Accepts a scalar or an array of times; times must be non-negative.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    m = np.exp(-params.alpha * t)
    var = (params.beta**2 / params.alpha) * (1.0 - np.exp(-2.0 * params.alpha * t))
    if t.ndim == 0:
        return float(m), float(var)
    return m, var


def sample_forward(x0, t, params: OuParams, rng: np.random.Generator) -> np.ndarray:
    """Exact draw x_t = m_t x0 + sigma_t xi with xi ~ N(0, I).

    ``x0`` may be a single vector or a (batch, d) array; ``t`` a scalar or a
    per-sample array.  At t = 0 the draw is exactly x0.
    """
    x0 = np.asarray(x0, dtype=float)
    m, var = ou_kernel(params, t)
    xi = rng.standard_normal(x0.shape)
    if np.ndim(m) == 0:
        return m * x0 + np.sqrt(var) * xi
    shape = (-1,) + (1,) * (x0.ndim - 1)
    return np.reshape(m, shape) * x0 + np.reshape(np.sqrt(var), shape) * xi


def conditional_score(x_t, x0, t, params: OuParams) -> np.ndarray:
    """Score of the transition kernel: -(x_t - m_t x0) / sigma_t^2.

    Rejects t <= 0, where the kernel is singular.
    """
    x_t = np.asarray(x_t, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise ValueError("conditional score requires strictly positive time")
    m, var = ou_kernel(params, t)
    if np.ndim(m) == 0:
        return -(x_t - m * x0) / var
    shape = (-1,) + (1,) * (x0.ndim - 1)
    return -(x_t - np.reshape(m, shape) * x0) / np.reshape(var, shape)


def gaussian_marginal_score(x, t, params: OuParams, data_mean=0.0, data_var=1.0) -> np.ndarray:
    """Exact marginal score when the clean data are Gaussian.

    For x0 ~ N(mu, s^2 I) the corrupted marginal at time t is
    N(m_t mu, (m_t^2 s^2 + sigma_t^2) I), so the score is
    -(x - m_t mu) / (m_t^2 s^2 + sigma_t^2), elementwise over coordinates.
    """
    x = np.asarray(x, dtype=float)
    m, var = ou_kernel(params, t)
    data_mean = np.asarray(data_mean, dtype=float)
    data_var = np.asarray(data_var, dtype=float)
    if np.ndim(m) == 0:
        return -(x - m * data_mean) / (m * m * data_var + var)
    shape = (-1,) + (1,) * (x.ndim - 1)
    m = np.reshape(m, shape)
    var = np.reshape(var, shape)
    return -(x - m * data_mean) / (m * m * data_var + var)


# ---------------------------------------------------------------------------
# Score network


class ScoreNet:
    """Two-hidden-layer tanh MLP with explicit time features.

    Input is the sample concatenated with four time features
    [t/T, sin(2 pi t/T), cos(2 pi t/T), sin(4 pi t/T)] where T is
    ``t_scale``.  Hidden weights start Gaussian with standard deviation
    1/sqrt(fan_in); the output layer starts at zero, so a fresh network is
    the zero score field.
    """

    N_TIME_FEATURES = 4

    def __init__(self, dim: int, hidden: int = 128, t_scale: float = 1.0, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be at least 1")
        if hidden < 1:
            raise ValueError("hidden must be at least 1")
        if not np.isfinite(t_scale) or t_scale <= 0:
            raise ValueError("t_scale must be positive")
        self.dim = int(dim)
        self.hidden = int(hidden)
        self.t_scale = float(t_scale)
        d_in = self.dim + self.N_TIME_FEATURES
        rng = keyed_generator(seed, 0xD5_00_00_02)
        self.w1 = rng.standard_normal((hidden, d_in)) / np.sqrt(d_in)
        self.b1 = np.zeros(hidden)
        self.w2 = rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)
        self.b2 = np.zeros(hidden)
        self.w3 = np.zeros((self.dim, hidden))
        self.b3 = np.zeros(self.dim)

    _PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def parameters(self) -> dict:
        """Name -> live array view of every trainable parameter."""
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def time_features(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        u = t / self.t_scale
        return np.stack(
            [u, np.sin(2 * np.pi * u), np.cos(2 * np.pi * u), np.sin(4 * np.pi * u)],
            axis=1,
        )

    def _inputs(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise ValueError(f"expected inputs of dimension {self.dim}, got {x.shape[1]}")
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            t = np.full(x.shape[0], float(t))
        if t.shape[0] != x.shape[0]:
            raise ValueError("one time per sample is required")
        return np.concatenate([x, self.time_features(t)], axis=1), squeeze

    def forward(self, x, t) -> np.ndarray:
        """Score estimate s(x, t); accepts a single vector or a batch."""
        (z, squeeze) = self._inputs(x, t)
        h1 = np.tanh(z @ self.w1.T + self.b1)
        h2 = np.tanh(h1 @ self.w2.T + self.b2)
        out = h2 @ self.w3.T + self.b3
        return out[0] if squeeze else out

    def loss_and_gradients(self, x, t, target, lam):
        """Weighted score-matching loss and exact parameter gradients.

        loss = mean_b lam_b ||s(x_b, t_b) - target_b||^2, with the gradient
        accumulated by reverse mode through both hidden layers.
        """
        (z, _) = self._inputs(x, t)
        target = np.asarray(target, dtype=float)
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        batch = z.shape[0]
        if target.shape != (batch, self.dim):
            raise ValueError("target shape must match the input batch")
        if lam.shape == (1,):
            lam = np.full(batch, lam[0])
        if lam.shape != (batch,):
            raise ValueError("one weight per sample is required")

        a1 = z @ self.w1.T + self.b1
        h1 = np.tanh(a1)
        a2 = h1 @ self.w2.T + self.b2
        h2 = np.tanh(a2)
        out = h2 @ self.w3.T + self.b3

        resid = out - target
        loss = float(np.mean(lam * np.sum(resid * resid, axis=1)))

        d_out = (2.0 / batch) * lam[:, None] * resid
        g_w3 = d_out.T @ h2
        g_b3 = d_out.sum(axis=0)
        d_h2 = d_out @ self.w3
        d_a2 = d_h2 * (1.0 - h2 * h2)
        g_w2 = d_a2.T @ h1
        g_b2 = d_a2.sum(axis=0)
        d_h1 = d_a2 @ self.w2
        d_a1 = d_h1 * (1.0 - h1 * h1)
        g_w1 = d_a1.T @ z
        g_b1 = d_a1.sum(axis=0)

        grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}
        return loss, grads


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss!r})")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for denoising score matching."""

    steps: int = 5000
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"      # or "sgd"
    weighting: str = "sigma2"    # or "one"
    ema_decay: float = 0.999     # final weights = EMA of iterates; 0 keeps the last iterate
    t_min: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.weighting not in ("sigma2", "one"):
            raise ValueError("weighting must be 'sigma2' or 'one'")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if not np.isfinite(self.t_min) or self.t_min <= 0:
            raise ValueError("t_min must be positive")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "weighting": self.weighting,
            "ema_decay": self.ema_decay,
            "t_min": self.t_min,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(
            steps=int(data.get("steps", 5000)),
            batch_size=int(data.get("batch_size", 128)),
            learning_rate=float(data.get("learning_rate", 1e-3)),
            optimizer=str(data.get("optimizer", "adam")),
            weighting=str(data.get("weighting", "sigma2")),
            ema_decay=float(data.get("ema_decay", 0.999)),
            t_min=float(data.get("t_min", 1e-3)),
            seed=int(data.get("seed", 0)),
        )


@dataclass(frozen=True)
class TrainResult:
    """Per-step raw loss and its exponential moving average."""

    loss: np.ndarray
    smoothed: np.ndarray

    @property
    def final_smoothed(self) -> float:
        return float(self.smoothed[-1]) if len(self.smoothed) else float("nan")


_SMOOTHING = 0.98  # EMA factor for the smoothed loss curve


def train(net: ScoreNet, data, params: OuParams, cfg: TrainConfig) -> TrainResult:
    """Denoising score matching on clean samples ``data`` of shape (M, d).

    Each step draws batch indices, times t ~ U(t_min, t_end], exact forward
    samples, and conditional-score targets, then applies one optimizer
    update.  The network is updated in place.  Identical (data, params, cfg)
    reproduce identical weights bit for bit: all randomness comes from one
    Philox stream keyed by cfg.seed.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError("training data must be a non-empty (M, d) array")
    if data.shape[1] != net.dim:
        raise ValueError(
            f"data dimension {data.shape[1]} does not match network dimension {net.dim}"
        )
    if not np.all(np.isfinite(data)):
        raise ValueError("training data contain non-finite values")
    if cfg.t_min >= params.t_end:
        raise ValueError("t_min must be smaller than the forward horizon")

    rng = keyed_generator(cfg.seed, _TRAIN_STREAM)
    m_samples = data.shape[0]
    names = net._PARAM_NAMES

    if cfg.optimizer == "adam":
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        moment1 = {k: np.zeros_like(getattr(net, k)) for k in names}
        moment2 = {k: np.zeros_like(getattr(net, k)) for k in names}
    if cfg.ema_decay > 0.0:
        averaged = {k: np.zeros_like(getattr(net, k)) for k in names}

    losses = np.empty(cfg.steps)
    smoothed = np.empty(cfg.steps)
    ema = None
    for step in range(cfg.steps):
        idx = rng.integers(0, m_samples, size=cfg.batch_size)
        x0 = data[idx]
        t = rng.uniform(cfg.t_min, params.t_end, size=cfg.batch_size)
        m, var = ou_kernel(params, t)
        xi = rng.standard_normal(x0.shape)
        x_t = m[:, None] * x0 + np.sqrt(var)[:, None] * xi
        target = -(x_t - m[:, None] * x0) / var[:, None]
        lam = var if cfg.weighting == "sigma2" else np.ones_like(var)

        loss, grads = net.loss_and_gradients(x_t, t, target, lam)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)

        if cfg.optimizer == "adam":
            for k in names:
                g = grads[k]
                moment1[k] = beta1 * moment1[k] + (1 - beta1) * g
                moment2[k] = beta2 * moment2[k] + (1 - beta2) * g * g
                m_hat = moment1[k] / (1 - beta1 ** (step + 1))
                v_hat = moment2[k] / (1 - beta2 ** (step + 1))
                getattr(net, k)[...] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        else:
            for k in names:
                getattr(net, k)[...] -= cfg.learning_rate * grads[k]

        if cfg.ema_decay > 0.0:
            for k in names:
                averaged[k] = cfg.ema_decay * averaged[k] + (1 - cfg.ema_decay) * getattr(net, k)

        losses[step] = loss
        ema = loss if ema is None else _SMOOTHING * ema + (1 - _SMOOTHING) * loss
        smoothed[step] = ema

    # The averaged iterate has far less optimizer jitter than the last one.
    if cfg.ema_decay > 0.0 and cfg.steps > 0:
        correction = 1.0 - cfg.ema_decay ** cfg.steps
        for k in names:
            getattr(net, k)[...] = averaged[k] / correction

    return TrainResult(loss=losses, smoothed=smoothed)


# ---------------------------------------------------------------------------
# Oracle score from a sample cloud


def silverman_bandwidth(points) -> float:
    """Silverman's rule for an isotropic Gaussian KDE in d dimensions."""
    points = np.asarray(points, dtype=float)
    m, d = points.shape
    sigma = float(np.mean(points.std(axis=0, ddof=1)))
    if sigma == 0:
        sigma = 1e-12
    return sigma * (4.0 / ((d + 2.0) * m)) ** (1.0 / (d + 4.0))


def kde_score_oracle(points, bandwidth: float, x) -> np.ndarray:
    """Score of an isotropic Gaussian KDE built on ``points``, evaluated at ``x``.

    grad log p(x) = sum_i w_i(x) (p_i - x) / h^2 with softmax weights
    w_i proportional to exp(-||x - p_i||^2 / (2 h^2)).  Stable via
    log-sum-exp; vectorized over rows of ``x``.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ValueError("points must be an (M, d) array")
    if not np.isfinite(bandwidth) or bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != points.shape[1]:
        raise ValueError("query dimension does not match the sample cloud")
    diff = points[None, :, :] - x[:, None, :]          # (B, M, d)
    logw = -np.sum(diff * diff, axis=2) / (2.0 * bandwidth**2)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    score = np.einsum("bm,bmd->bd", w, diff) / bandwidth**2
    return score[0] if squeeze else score


# ---------------------------------------------------------------------------
# Checkpoints and loss curves

_CKPT_MAGIC = b"QSCK"
_CKPT_VERSION = 1


def save_checkpoint(net: ScoreNet, path, metadata: dict | None = None) -> None:
    """Binary checkpoint: versioned header, layer dims, packed LE doubles."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIIIId",
                _CKPT_MAGIC,
                _CKPT_VERSION,
                net.dim,
                net.hidden,
                ScoreNet.N_TIME_FEATURES,
                net.t_scale,
            )
        )
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name in net._PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(net, name), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ScoreNet, dict]:
    """Load a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sIIIId"))
        magic, version, dim, hidden, n_time, t_scale = struct.unpack("<4sIIIId", head)
        if magic != _CKPT_MAGIC:
            raise ValueError("not a score-network checkpoint (bad magic)")
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if n_time != ScoreNet.N_TIME_FEATURES:
            raise ValueError("checkpoint uses an incompatible time-feature layout")
        (mlen,) = struct.unpack("<I", fh.read(4))
        metadata = json.loads(fh.read(mlen).decode("utf-8"))
        net = ScoreNet(dim=dim, hidden=hidden, t_scale=t_scale, seed=0)
        shapes = {
            "w1": (hidden, dim + n_time),
            "b1": (hidden,),
            "w2": (hidden, hidden),
            "b2": (hidden,),
            "w3": (dim, hidden),
            "b3": (dim,),
        }
        for name in net._PARAM_NAMES:
            shape = shapes[name]
            count = int(np.prod(shape))
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError("checkpoint truncated")
            setattr(net, name, np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    return net, metadata


def loss_curve_csv(result: TrainResult, path) -> None:
    """Write (step, raw loss, smoothed loss) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "smoothed_loss"])
        for k, (raw, smooth) in enumerate(zip(result.loss, result.smoothed)):
            writer.writerow([k, repr(float(raw)), repr(float(smooth))])
