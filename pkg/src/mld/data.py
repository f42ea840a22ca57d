"""Synthetic multi-modal data with a shared class label.

Modality ``i`` draws class ``c`` around the point at angle ``2 pi c / K + phase_i``
on the unit circle, embedded in ``data_dim`` by a modality-specific orthonormal
basis. A "hard" modality gets stronger noise plus label-independent nuisance
directions, so its latent carries the class less robustly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import CheckpointError, ConfigError, ShapeError


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 4
    data_dims: tuple[int, ...] = (8, 8, 12)
    noise_scale: float = 0.1
    samples_per_class: int = 500
    seed: int = 0
    hard_modalities: tuple[int, ...] = ()
    hard_noise_factor: float = 2.5
    nuisance_dims: int = 4
    nuisance_scale: float = 1.0
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if not self.data_dims or any(d < 1 for d in self.data_dims):
            raise ConfigError("every data dim must be >= 1")
        if self.noise_scale < 0 or self.samples_per_class < 0:
            raise ConfigError("noise_scale and samples_per_class must be non-negative")
        for h in self.hard_modalities:
            if not 0 <= h < len(self.data_dims):
                raise ConfigError(f"hard modality index {h} out of range")
            if self.data_dims[h] < 2 + self.nuisance_dims:
                raise ConfigError(f"hard modality {h} needs data_dim >= {2 + self.nuisance_dims}")
        if self.names is not None and len(self.names) != len(self.data_dims):
            raise ConfigError("names and data_dims differ in length")

    @property
    def n_modalities(self) -> int:
        return len(self.data_dims)

    def modality_names(self) -> list[str]:
        return list(self.names) if self.names else [f"m{i}" for i in range(self.n_modalities)]


@dataclass
class MultiModalDataset:
    names: list[str]
    modalities: list[np.ndarray]
    labels: np.ndarray
    pairing: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if len(self.names) != len(self.modalities):
            raise ShapeError("names and modalities differ in length")
        for name, x in zip(self.names, self.modalities):
            if x.ndim != 2 or len(x) != n:
                raise ShapeError(f"modality {name!r} has shape {x.shape}, expected ({n}, d)")
        if self.pairing is None:
            self.pairing = np.tile(np.arange(n, dtype=np.int64)[:, None], (1, len(self.modalities)))
        self.pairing = np.asarray(self.pairing, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "MultiModalDataset":
        return MultiModalDataset(list(self.names), [x[idx] for x in self.modalities], self.labels[idx], self.pairing[idx])

    def split(self, n_test: int, seed: int = 0):
        """Shuffled (train, test) split."""
        order = np.random.default_rng(seed).permutation(len(self))
        return self.subset(order[n_test:]), self.subset(order[:n_test])


def class_templates(config: SyntheticConfig, modality: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(templates (K, d), basis (d, d))``; basis columns 0-1 span the class plane."""
    d, K = config.data_dims[modality], config.n_classes
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    if d == 1:
        return np.linspace(-1.0, 1.0, K)[:, None] if K > 1 else np.zeros((1, 1)), basis
    phase = rng.uniform(0, 2 * np.pi)
    angles = 2 * np.pi * np.arange(K) / K + phase
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return circle @ basis[:, :2].T, basis


def generate_synthetic(config: SyntheticConfig) -> MultiModalDataset:
    rng = np.random.default_rng(config.seed)
    K, n_per = config.n_classes, config.samples_per_class
    labels = np.repeat(np.arange(K), n_per)
    modalities = []
    for i, d in enumerate(config.data_dims):
        templates, basis = class_templates(config, i, rng)
        noise = config.noise_scale
        if i in config.hard_modalities:
            noise *= config.hard_noise_factor
        x = templates[labels] + noise * rng.standard_normal((len(labels), d))
        if i in config.hard_modalities and config.nuisance_dims:
            nuis = basis[:, 2:2 + config.nuisance_dims]
            x = x + config.nuisance_scale * rng.standard_normal((len(labels), config.nuisance_dims)) @ nuis.T
        modalities.append(x)
    return MultiModalDataset(config.modality_names(), modalities, labels)


def pair_by_label(dataset_a: MultiModalDataset, dataset_b: MultiModalDataset, k_pairs: int, rng) -> MultiModalDataset:
    """Pair every instance of ``a`` with ``k_pairs`` same-class instances of ``b``.

    Within each class, ``b``'s members are dealt out from fresh random
    permutations, so equal class counts with ``k_pairs=1`` give a permutation.
    The pairing table holds ``(index_in_a, index_in_b)`` per output row.
    """
    if k_pairs < 1:
        raise ConfigError("k_pairs must be >= 1")
    rows_a, rows_b = [], []
    for c in np.unique(dataset_a.labels):
        ia = np.flatnonzero(dataset_a.labels == c)
        ib = np.flatnonzero(dataset_b.labels == c)
        if len(ib) == 0:
            raise ShapeError(f"class {c} absent from the second dataset")
        for _ in range(k_pairs):
            n_rounds = -(-len(ia) // len(ib))
            pool = np.concatenate([rng.permutation(ib) for _ in range(n_rounds)])[:len(ia)]
            rows_a.append(ia)
            rows_b.append(pool)
    ra = np.concatenate(rows_a) if rows_a else np.zeros(0, dtype=np.int64)
    rb = np.concatenate(rows_b) if rows_b else np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(ra)), ra))
    ra, rb = ra[order], rb[order]
    return MultiModalDataset(
        dataset_a.names + dataset_b.names,
        [x[ra] for x in dataset_a.modalities] + [x[rb] for x in dataset_b.modalities],
        dataset_a.labels[ra],
        np.stack([ra, rb], axis=1),
    )


def dataset_tensors(ds: MultiModalDataset) -> dict[str, np.ndarray]:
    tensors = {f"data.{name}": x for name, x in zip(ds.names, ds.modalities)}
    tensors["labels"] = ds.labels
    tensors["pairing"] = ds.pairing
    return tensors


def save_dataset(path, ds: MultiModalDataset) -> None:
    checkpoint.save(path, dataset_tensors(ds))


def load_dataset(path) -> MultiModalDataset:
    t = checkpoint.load(path)
    if "labels" not in t:
        raise CheckpointError(f"{path}: no 'labels' tensor")
    names = [k[len("data."):] for k in t if k.startswith("data.")]
    return MultiModalDataset(names, [t[f"data.{n}"] for n in names], checkpoint.as_int(t["labels"]),
                             checkpoint.as_int(t["pairing"]) if "pairing" in t else None)
