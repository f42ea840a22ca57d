"""Coherence, Frechet modality distance and the latent robustness scan."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autoencoder import JointEncoder
from .diffusion import DiffusionConfig, diffuse
from .errors import NumericError, ShapeError
from .nn import AdamState, MlpParams, adam_step, init_mlp, mlp_backward, mlp_forward


@dataclass
class TinyClassifier:
    params: MlpParams
    n_classes: int

    def logits(self, x):
        return mlp_forward(self.params, x)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def embed(self, x) -> np.ndarray:
        """Penultimate-layer activations."""
        _, (hs, _) = mlp_forward(self.params, x, return_cache=True)
        return hs[-2]

    def accuracy(self, x, labels) -> float:
        return float(np.mean(self.predict(x) == labels))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def train_classifier(x, labels, n_classes: int, epochs: int = 50, lr: float = 3e-3, seed: int = 0,
                     hidden=(32, 32), batch_size: int = 128) -> TinyClassifier:
    """Softmax cross-entropy MLP classifier trained with Adam."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) != len(labels) or len(x) == 0:
        raise ShapeError("need a non-empty labelled set")
    rng = np.random.default_rng(seed)
    params = init_mlp([x.shape[1], *hidden, n_classes], rng)
    arrays = params.arrays()
    opt = AdamState.for_params(arrays, lr=lr)
    onehot = np.eye(n_classes)[labels]
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            logits, cache = mlp_forward(params, x[idx], return_cache=True)
            p = _softmax(logits)
            loss = -np.mean(np.sum(onehot[idx] * np.log(p + 1e-300), axis=1))
            if not np.isfinite(loss):
                raise NumericError("non-finite classifier loss")
            grads, _ = mlp_backward(params, x[idx], (p - onehot[idx]) / len(idx), cache)
            adam_step(opt, arrays, grads)
    return TinyClassifier(params, n_classes)


def conditional_coherence(classifier: TinyClassifier, generated, labels) -> float:
    """Percentage of generated samples classified as their conditioning label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ShapeError("coherence of an empty set is undefined")
    return 100.0 * float(np.mean(classifier.predict(generated) == labels))


def joint_coherence(classifiers: list[TinyClassifier], generated: list) -> float:
    """Percentage of joint samples on which every modality classifier predicts the same class."""
    preds = np.stack([c.predict(x) for c, x in zip(classifiers, generated)])
    if preds.shape[1] == 0:
        raise ShapeError("coherence of an empty set is undefined")
    return 100.0 * float(np.mean(np.all(preds == preds[0], axis=0)))


def agreement_rate(predictions, labels=None) -> float:
    """Coherence from precomputed predictions, shape ``(M, n)``.

    With ``labels``, every row must match them; without, all rows must agree.
    """
    preds = np.atleast_2d(np.asarray(predictions))
    if preds.shape[1] == 0:
        raise ShapeError("coherence of an empty set is undefined")
    ref = preds[0] if labels is None else np.asarray(labels)
    return 100.0 * float(np.mean(np.all(preds == ref, axis=0)))


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def of(cls, embeddings) -> "GaussianStats":
        e = np.asarray(embeddings, dtype=np.float64)
        if e.ndim != 2 or len(e) < 2:
            raise ShapeError("need at least two embeddings for a covariance")
        return cls(e.mean(axis=0), np.atleast_2d(np.cov(e, rowvar=False)))


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken as the root of the symmetric
    ``S_a^(1/2) S_b S_a^(1/2)``, which has the same spectrum.
    """
    mu_a, mu_b = np.atleast_1d(a.mean), np.atleast_1d(b.mean)
    if mu_a.shape != mu_b.shape or np.shape(a.cov) != np.shape(b.cov):
        raise ShapeError(f"stat dims differ: {mu_a.shape} vs {mu_b.shape}")
    ca, cb = np.atleast_2d(a.cov), np.atleast_2d(b.cov)
    root_a = _psd_sqrt(ca)
    inner = root_a @ cb @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_cross)


def fmd(classifier: TinyClassifier, real, generated) -> float:
    return frechet_distance(GaussianStats.of(classifier.embed(real)), GaussianStats.of(classifier.embed(generated)))


def robustness_scan(encoder: JointEncoder, classifiers: list[TinyClassifier], data: list, labels,
                    t_grid, config: DiffusionConfig, rng) -> np.ndarray:
    """Coherence (percent) of decoded, kernel-perturbed latents; shape ``(len(t_grid), M)``."""
    labels = np.asarray(labels)
    latents = [encoder.encode_one(i, x) for i, x in enumerate(data)]
    out = np.zeros((len(t_grid), len(data)))
    for row, t in enumerate(t_grid):
        for i, z in enumerate(latents):
            r = diffuse(config, z, t, rng.standard_normal(z.shape))
            out[row, i] = conditional_coherence(classifiers[i], encoder.decode_one(i, r), labels)
    return out


def weakly_decreasing(values, tol: float = 0.0, max_violations: int = 2) -> bool:
    """True when at most ``max_violations`` consecutive increases exceed ``tol``."""
    v = np.asarray(values, dtype=np.float64)
    return int(np.sum(np.diff(v) > tol)) <= max_violations
