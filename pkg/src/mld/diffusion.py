"""VP-SDE on the joint latent and masked multi-time score training.

Forward SDE ``dR = -beta(t)/2 R dt + sqrt(beta(t)) dW`` with linear
``beta(t) = beta_min + t (beta_max - beta_min)``. The score network predicts
the injected noise; its score estimate is ``-eps_hat / sigma(t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import ConfigError, NumericError, ShapeError
from .latent import (ModalityLayout, SubsetPartition, build_mask, proper_subsets,
                     times_per_coordinate)
from .nn import (AdamState, EmaState, MlpParams, adam_step, ema_update, global_norm,
                 init_resmlp, mlp_backward, mlp_forward)

TRAINING_MODES = ("multitime", "unidiffuser", "unconditional")


@dataclass(frozen=True)
class DiffusionConfig:
    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    n_steps: int = 250
    d: float = 0.5
    t_eps: float = 1e-5

    def __post_init__(self):
        if not 0 < self.beta_min < self.beta_max:
            raise ConfigError(f"need 0 < beta_min < beta_max, got {self.beta_min}, {self.beta_max}")
        if self.T <= 0:
            raise ConfigError("T must be positive")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if not 0.0 <= self.d <= 1.0:
            raise ConfigError(f"d must lie in [0, 1], got {self.d}")
        if not 0 < self.t_eps < self.T:
            raise ConfigError("need 0 < t_eps < T")


@dataclass(frozen=True)
class KernelParams:
    mean_coeff: np.ndarray | float
    variance: np.ndarray | float

    @property
    def std(self):
        return np.sqrt(self.variance)


def _check_time(config: DiffusionConfig, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > config.T * (1 + 1e-12)):
        raise ValueError(f"time outside [0, {config.T}]")
    return t


def beta(config: DiffusionConfig, t):
    t = _check_time(config, t)
    return config.beta_min + t * (config.beta_max - config.beta_min)


def log_mean_coeff(config: DiffusionConfig, t):
    t = _check_time(config, t)
    return -0.25 * t ** 2 * (config.beta_max - config.beta_min) - 0.5 * t * config.beta_min


def kernel(config: DiffusionConfig, t) -> KernelParams:
    """Closed-form marginal ``q(r | z, t) = N(a(t) z, sigma^2(t) I)``."""
    lm = log_mean_coeff(config, t)
    a = np.exp(lm)
    # 1 - a^2 without cancellation at small t
    var = -np.expm1(2.0 * lm)
    if np.ndim(a) == 0:
        return KernelParams(float(a), float(var))
    return KernelParams(a, var)


def diffuse(config: DiffusionConfig, z, t, noise):
    z = np.asarray(z, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if z.shape != noise.shape:
        raise ShapeError(f"noise shape {noise.shape} != latent shape {z.shape}")
    k = kernel(config, t)
    return k.mean_coeff * z + np.sqrt(k.variance) * noise


def sample_partition(config: DiffusionConfig, n_modalities: int, rng) -> SubsetPartition:
    """Draw the conditioning set: empty with prob d, else uniform over non-empty proper subsets.

    No random numbers are consumed when the outcome is forced (d == 1 or M == 1).
    """
    if n_modalities < 1:
        raise ConfigError("need at least one modality")
    everything = frozenset(range(n_modalities))
    if config.d >= 1.0 or n_modalities == 1:
        return SubsetPartition(everything, frozenset())
    if config.d > 0.0 and rng.random() < config.d:
        return SubsetPartition(everything, frozenset())
    subsets = proper_subsets(n_modalities)
    a2 = subsets[int(rng.integers(len(subsets)))]
    return SubsetPartition(everything - a2, a2)


def partition_probabilities(config: DiffusionConfig, n_modalities: int) -> dict:
    """Exact law of :func:`sample_partition`, keyed by the conditioning set."""
    if config.d >= 1.0 or n_modalities == 1:
        return {frozenset(): 1.0}
    subsets = proper_subsets(n_modalities)
    probs = {frozenset(): config.d}
    for s in subsets:
        probs[s] = (1.0 - config.d) / len(subsets)
    return probs


def omega(layout: ModalityLayout, partition: SubsetPartition) -> float:
    partition.validate(layout.n_modalities)
    return 1.0 + layout.dim_of(partition.a2) / layout.dim_of(partition.a1)


def gaussian_score_oracle(mean0, diag_cov0, config: DiffusionConfig, r, t):
    """Exact score of the time-t marginal when the initial law is ``N(mean0, diag(cov0))``.

    ``t`` may be per-coordinate (same shape as ``r``).
    """
    k = kernel(config, t)
    a = k.mean_coeff
    return -(np.asarray(r) - a * np.asarray(mean0)) / (a ** 2 * np.asarray(diag_cov0) + k.variance)


class GaussianOracle:
    """Drop-in for :class:`ScoreNetwork` backed by the analytic diagonal-Gaussian score."""

    def __init__(self, layout: ModalityLayout, config: DiffusionConfig, mean0=0.0, diag_cov0=1.0):
        self.layout = layout
        self.config = config
        self.mean0 = mean0
        self.diag_cov0 = diag_cov0

    def score(self, r, tau):
        tc = times_per_coordinate(self.layout, np.broadcast_to(tau, np.shape(r)[:-1] + (self.layout.n_modalities,)))
        return gaussian_score_oracle(self.mean0, self.diag_cov0, self.config, r, tc)


def time_embedding(t, embed_dim: int, time_scale: float = 100.0, max_period: float = 10000.0):
    """Sinusoidal features ``[sin(w t), cos(w t)]`` with geometric frequencies; ``(..., embed_dim)``."""
    half = embed_dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = time_scale * np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


class ScoreNetwork:
    """Residual MLP taking ``[r, emb(tau_1), ..., emb(tau_M)]`` and predicting the noise."""

    def __init__(self, layout: ModalityLayout, config: DiffusionConfig, params: MlpParams,
                 embed_dim: int = 16, time_scale: float = 100.0):
        if embed_dim < 2 or embed_dim % 2:
            raise ConfigError("time embedding size must be an even number >= 2")
        expected = layout.total_dim + layout.n_modalities * embed_dim
        if params.in_dim != expected or params.out_dim != layout.total_dim:
            raise ShapeError(f"score network maps {params.in_dim}->{params.out_dim}, "
                             f"layout needs {expected}->{layout.total_dim}")
        self.layout = layout
        self.config = config
        self.params = params
        self.embed_dim = embed_dim
        self.time_scale = time_scale

    @classmethod
    def create(cls, layout, config, rng, width=128, n_blocks=2, embed_dim=16, time_scale=100.0):
        in_dim = layout.total_dim + layout.n_modalities * embed_dim
        params = init_resmlp(in_dim, layout.total_dim, width, n_blocks, rng)
        return cls(layout, config, params, embed_dim, time_scale)

    def with_params(self, params: MlpParams) -> "ScoreNetwork":
        return ScoreNetwork(self.layout, self.config, params, self.embed_dim, self.time_scale)

    def features(self, r, tau):
        r = np.asarray(r, dtype=np.float64)
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), r.shape[:-1] + (self.layout.n_modalities,))
        emb = time_embedding(tau, self.embed_dim, self.time_scale)
        return np.concatenate([r, emb.reshape(r.shape[:-1] + (-1,))], axis=-1)

    def predict_noise(self, r, tau):
        return mlp_forward(self.params, self.features(r, tau))

    def score(self, r, tau):
        """Score estimate on diffused coordinates; frozen (time 0) coordinates get 0."""
        eps_hat = self.predict_noise(r, tau)
        tc = times_per_coordinate(self.layout, np.broadcast_to(tau, eps_hat.shape[:-1] + (self.layout.n_modalities,)))
        sigma = np.sqrt(kernel(self.config, tc).variance)
        live = tc > 0
        return np.where(live, -eps_hat / np.where(live, sigma, 1.0), 0.0)


@dataclass
class TrainingBatchOutcome:
    step: int
    partition: SubsetPartition
    t: float
    loss: float
    omega: float
    grad_norm: float
    times: np.ndarray = field(repr=False, default=None)

    @property
    def a2_size(self) -> int:
        return len(self.partition.a2)


def denoising_loss(net: ScoreNetwork, z, tau, noise, mask, weight: float):
    """Weighted, mask-restricted noise-prediction loss and its parameter gradients.

    ``tau`` has shape ``(batch, M)``; coordinates whose time is 0 are left at
    ``z`` exactly. Returns ``(loss, per_sample_loss, grads, r)``.
    """
    config = net.config
    tc = times_per_coordinate(net.layout, tau)
    k = kernel(config, tc)
    r = k.mean_coeff * z + np.sqrt(k.variance) * noise
    r = np.where(mask > 0, r, z)
    feats = net.features(r, tau)
    eps_hat, cache = mlp_forward(net.params, feats, return_cache=True)
    resid = mask * (eps_hat - noise)
    B, D = z.shape
    per_sample = weight * np.sum(resid ** 2, axis=1) / D
    loss = float(np.mean(per_sample))
    upstream = weight * 2.0 * resid / (B * D)
    grads, _ = mlp_backward(net.params, feats, upstream, cache)
    return loss, per_sample, grads, r


class ScoreTrainer:
    """Owns a score network together with its Adam and EMA state."""

    def __init__(self, net: ScoreNetwork, lr: float = 1e-3, ema_momentum: float = 0.999,
                 mode: str = "multitime"):
        if mode not in TRAINING_MODES:
            raise ConfigError(f"unknown training mode {mode!r}; expected one of {TRAINING_MODES}")
        self.net = net
        self.mode = mode
        arrays = net.params.arrays()
        self.adam = AdamState.for_params(arrays, lr=lr)
        self.ema = EmaState.for_params(arrays, ema_momentum)
        self.step_count = 0

    @property
    def config(self):
        if self.mode == "unconditional":
            c = self.net.config
            return DiffusionConfig(c.beta_min, c.beta_max, c.T, c.n_steps, 1.0, c.t_eps)
        return self.net.config

    def ema_network(self) -> ScoreNetwork:
        p = self.net.params
        shadow = self.ema.shadow
        params = MlpParams([w.copy() for w in shadow[0::2]], [b.copy() for b in shadow[1::2]],
                           list(p.acts), p.activation, list(p.skips))
        return self.net.with_params(params)

    def _apply(self, loss, grads, partition, t_mean, weight, times):
        if not np.isfinite(loss):
            raise NumericError(f"non-finite score loss at step {self.step_count}")
        gn = global_norm(grads)
        arrays = self.net.params.arrays()
        adam_step(self.adam, arrays, grads)
        ema_update(self.ema, arrays)
        self.step_count += 1
        return TrainingBatchOutcome(self.step_count, partition, t_mean, loss, weight, gn, times)

    def step(self, z, rng) -> TrainingBatchOutcome:
        if self.mode == "unidiffuser":
            return unidiffuser_training_step(self, z, rng)
        return training_step(self, z, rng)

    def save(self, path, extra=None):
        tensors = {"layout.dims": np.array(self.net.layout.dims)}
        tensors["score.meta"] = np.array([self.net.embed_dim, self.net.time_scale,
                                          TRAINING_MODES.index(self.mode), self.step_count])
        tensors.update(checkpoint.mlp_tensors("score", self.net.params))
        tensors.update(checkpoint.mlp_tensors("score.ema", self.ema_network().params))
        if extra:
            tensors.update(extra)
        checkpoint.save(path, tensors)


def load_score_network(path, layout: ModalityLayout, config: DiffusionConfig, use_ema=True):
    """Returns ``(network, mode)`` from a score checkpoint."""
    t = checkpoint.load(path)
    dims = tuple(int(v) for v in checkpoint.as_int(t["layout.dims"]))
    if dims != layout.dims:
        raise ConfigError(f"checkpoint latent dims {dims} do not match configured {layout.dims}")
    embed_dim, time_scale, mode_code, _ = t["score.meta"]
    params = checkpoint.mlp_from_tensors("score.ema" if use_ema else "score", t)
    net = ScoreNetwork(layout, config, params, int(embed_dim), float(time_scale))
    return net, TRAINING_MODES[int(mode_code)]


def _as_latent_batch(trainer: ScoreTrainer, batch, encoder):
    z = encoder.encode(batch) if encoder is not None else np.asarray(batch, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != trainer.net.layout.total_dim:
        raise ShapeError(f"latent batch shape {z.shape} does not match layout dim {trainer.net.layout.total_dim}")
    return z


def training_step(trainer: ScoreTrainer, batch, rng, encoder=None) -> TrainingBatchOutcome:
    """One masked multi-time step: draw A2, draw times, diffuse only A1, weight by omega.

    ``batch`` is a joint latent array, or per-modality data when ``encoder``
    (a :class:`~mld.autoencoder.JointEncoder`) is given.
    """
    z = _as_latent_batch(trainer, batch, encoder)
    config = trainer.config
    layout = trainer.net.layout
    partition = sample_partition(config, layout.n_modalities, rng)
    t = rng.uniform(config.t_eps, config.T, size=len(z))
    noise = rng.standard_normal(z.shape)
    mask = build_mask(layout, partition)
    ind = np.array([1.0 if i in partition.a1 else 0.0 for i in range(layout.n_modalities)])
    tau = t[:, None] * ind
    weight = omega(layout, partition)
    loss, _, grads, _ = denoising_loss(trainer.net, z, tau, noise, mask, weight)
    return trainer._apply(loss, grads, partition, float(t.mean()), weight, tau)


def unidiffuser_training_step(trainer: ScoreTrainer, batch, rng, encoder=None) -> TrainingBatchOutcome:
    """Every modality diffused at its own independent time; no masking, unit weight."""
    z = _as_latent_batch(trainer, batch, encoder)
    config = trainer.config
    layout = trainer.net.layout
    tau = rng.uniform(config.t_eps, config.T, size=(len(z), layout.n_modalities))
    noise = rng.standard_normal(z.shape)
    mask = np.ones(layout.total_dim)
    everything = SubsetPartition(frozenset(range(layout.n_modalities)), frozenset())
    loss, _, grads, _ = denoising_loss(trainer.net, z, tau, noise, mask, 1.0)
    return trainer._apply(loss, grads, everything, float(tau.mean()), 1.0, tau)
