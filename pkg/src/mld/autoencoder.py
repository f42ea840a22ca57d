"""Deterministic per-modality autoencoders and latent standardisation.

Each modality trains on its own reconstruction loss with its own parameters
and optimizer; nothing is shared between modalities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import NumericError, ShapeError
from .latent import ModalitySpec
from .nn import AdamState, MlpParams, adam_step, init_mlp, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6


@dataclass
class AutoencoderPair:
    spec: ModalitySpec
    encoder: MlpParams
    decoder: MlpParams

    def __post_init__(self):
        if self.encoder.in_dim != self.spec.data_dim or self.encoder.out_dim != self.spec.latent_dim:
            raise ShapeError(f"{self.spec.name}: encoder maps {self.encoder.in_dim}->{self.encoder.out_dim}")
        if self.decoder.in_dim != self.spec.latent_dim or self.decoder.out_dim != self.spec.data_dim:
            raise ShapeError(f"{self.spec.name}: decoder maps {self.decoder.in_dim}->{self.decoder.out_dim}")

    def arrays(self):
        return self.encoder.arrays() + self.decoder.arrays()

    def reconstruct(self, x):
        return mlp_forward(self.decoder, mlp_forward(self.encoder, x))

    def mse(self, x) -> float:
        return float(np.mean((self.reconstruct(x) - x) ** 2))


@dataclass
class LatentNormalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ShapeError("normalizer mean/std shapes differ")
        if np.any(self.std <= 0):
            raise ValueError("normalizer std must be positive")

    def normalize(self, z):
        return (z - self.mean) / self.std

    def denormalize(self, zn):
        return zn * self.std + self.mean


def init_autoencoder(spec: ModalitySpec, rng, hidden=(64,), linear=False) -> AutoencoderPair:
    if linear:
        enc = init_mlp([spec.data_dim, spec.latent_dim], rng, activation="identity")
        dec = init_mlp([spec.latent_dim, spec.data_dim], rng, activation="identity")
    else:
        enc = init_mlp([spec.data_dim, *hidden, spec.latent_dim], rng)
        dec = init_mlp([spec.latent_dim, *reversed(hidden), spec.data_dim], rng)
    return AutoencoderPair(spec, enc, dec)


def ae_loss_and_grads(pair: AutoencoderPair, x):
    """Mean squared reconstruction error and its gradients (encoder then decoder)."""
    z, enc_cache = mlp_forward(pair.encoder, x, return_cache=True)
    xhat, dec_cache = mlp_forward(pair.decoder, z, return_cache=True)
    diff = xhat - x
    loss = float(np.mean(diff ** 2))
    g_out = 2.0 * diff / diff.size
    dec_grads, g_z = mlp_backward(pair.decoder, z, g_out, dec_cache)
    enc_grads, _ = mlp_backward(pair.encoder, x, g_z, enc_cache)
    return loss, enc_grads + dec_grads


def train_autoencoder(spec: ModalitySpec, data, epochs: int, lr: float = 1e-3, seed: int = 0,
                      batch_size: int = 128, hidden=(64,), linear=False, log_fn=None) -> AutoencoderPair:
    """Fit one modality's autoencoder with Adam on minibatches.

    ``log_fn(epoch, loss)`` is called with the mean training loss per epoch.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != spec.data_dim:
        raise ShapeError(f"{spec.name}: expected (n, {spec.data_dim}) data, got {data.shape}")
    rng = np.random.default_rng(seed)
    pair = init_autoencoder(spec, rng, hidden, linear)
    arrays = pair.arrays()
    opt = AdamState.for_params(arrays, lr=lr)
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            batch = data[order[start:start + batch_size]]
            loss, grads = ae_loss_and_grads(pair, batch)
            if not np.isfinite(loss):
                raise NumericError(f"{spec.name}: non-finite reconstruction loss at epoch {epoch}")
            adam_step(opt, arrays, grads)
            total += loss * len(batch)
        if log_fn is not None:
            log_fn(epoch, total / n)
    log.debug("%s: final train mse %.3e", spec.name, pair.mse(data))
    return pair


def fit_normalizer(encoder: MlpParams, first_batch) -> LatentNormalizer:
    """Per-dimension mean/std of the encoded first batch, std floored at 1e-6."""
    first_batch = np.asarray(first_batch, dtype=np.float64)
    if first_batch.ndim != 2 or len(first_batch) < 2:
        raise ShapeError("normalizer needs a batch of at least two samples")
    z = mlp_forward(encoder, first_batch)
    return LatentNormalizer(z.mean(axis=0), np.maximum(z.std(axis=0), STD_FLOOR))


def encode(pair: AutoencoderPair, normalizer: LatentNormalizer, x):
    return normalizer.normalize(mlp_forward(pair.encoder, x))


def decode(pair: AutoencoderPair, normalizer: LatentNormalizer, z_normalized):
    z_normalized = np.asarray(z_normalized, dtype=np.float64)
    if z_normalized.shape[-1] != pair.spec.latent_dim:
        raise ShapeError(f"{pair.spec.name}: latent dim {z_normalized.shape[-1]} != {pair.spec.latent_dim}")
    return mlp_forward(pair.decoder, normalizer.denormalize(z_normalized))


def save_autoencoder(path, pair: AutoencoderPair, normalizer: LatentNormalizer) -> None:
    tensors = {"spec.dims": np.array([pair.spec.data_dim, pair.spec.latent_dim])}
    tensors.update(checkpoint.mlp_tensors("enc", pair.encoder))
    tensors.update(checkpoint.mlp_tensors("dec", pair.decoder))
    tensors["norm.mean"] = normalizer.mean
    tensors["norm.std"] = normalizer.std
    checkpoint.save(path, tensors)


def load_autoencoder(path, name: str) -> tuple[AutoencoderPair, LatentNormalizer]:
    t = checkpoint.load(path)
    data_dim, latent_dim = (int(v) for v in checkpoint.as_int(t["spec.dims"]))
    pair = AutoencoderPair(ModalitySpec(name, data_dim, latent_dim),
                           checkpoint.mlp_from_tensors("enc", t), checkpoint.mlp_from_tensors("dec", t))
    return pair, LatentNormalizer(t["norm.mean"].copy(), t["norm.std"].copy())


class JointEncoder:
    """All modalities' autoencoders and normalizers, mapping data to the joint latent."""

    def __init__(self, pairs: list[AutoencoderPair], normalizers: list[LatentNormalizer]):
        self.pairs = pairs
        self.normalizers = normalizers

    def encode(self, data: list) -> np.ndarray:
        return np.concatenate([encode(p, n, x) for p, n, x in zip(self.pairs, self.normalizers, data)], axis=-1)

    def encode_one(self, i: int, x):
        return encode(self.pairs[i], self.normalizers[i], x)

    def decode_one(self, i: int, z):
        return decode(self.pairs[i], self.normalizers[i], z)
