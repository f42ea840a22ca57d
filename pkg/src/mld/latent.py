"""Joint latent layout and modality subset algebra.

Modalities are indexed from 0 in code. A partition splits them into the set
being generated (``a1``) and the frozen conditioning set (``a2``).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    data_dim: int
    latent_dim: int

    def __post_init__(self):
        if not self.name:
            raise ConfigError("modality name must be non-empty")
        if int(self.data_dim) < 1:
            raise ConfigError(f"modality {self.name!r}: data_dim must be >= 1, got {self.data_dim}")
        if int(self.latent_dim) < 1:
            raise ConfigError(f"modality {self.name!r}: latent_dim must be >= 1, got {self.latent_dim}")


@dataclass(frozen=True)
class ModalityLayout:
    specs: tuple[ModalitySpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if not self.specs:
            raise ConfigError("layout needs at least one modality")
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names in {names}")

    @classmethod
    def from_dims(cls, latent_dims: Sequence[int], names=None) -> "ModalityLayout":
        names = names or [f"m{i}" for i in range(len(latent_dims))]
        return cls(tuple(ModalitySpec(n, d, d) for n, d in zip(names, latent_dims)))

    @property
    def n_modalities(self) -> int:
        return len(self.specs)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.latent_dim for s in self.specs)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.dims)[:-1]]))

    @property
    def total_dim(self) -> int:
        return int(sum(self.dims))

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown modality {name!r}; known: {self.names}") from None

    def block(self, i: int) -> slice:
        off = self.offsets[i]
        return slice(off, off + self.dims[i])

    def dim_of(self, subset) -> int:
        return int(sum(self.dims[i] for i in subset))


@dataclass(frozen=True)
class SubsetPartition:
    a1: frozenset
    a2: frozenset

    @classmethod
    def conditioning_on(cls, a2, n_modalities: int) -> "SubsetPartition":
        a2 = frozenset(a2)
        return cls(frozenset(range(n_modalities)) - a2, a2)

    def validate(self, n_modalities: int) -> "SubsetPartition":
        everything = frozenset(range(n_modalities))
        if self.a1 & self.a2:
            raise ConfigError(f"a1 and a2 overlap on {sorted(self.a1 & self.a2)}")
        if self.a1 | self.a2 != everything:
            raise ConfigError(f"partition does not cover modalities 0..{n_modalities - 1}")
        if not self.a1:
            raise ConfigError("a1 must be non-empty (nothing to generate)")
        return self


def proper_subsets(n_modalities: int) -> list[frozenset]:
    """Non-empty proper subsets of ``{0..M-1}``, smallest first."""
    items = range(n_modalities)
    return [frozenset(c) for k in range(1, n_modalities) for c in combinations(items, k)]


def build_mask(layout: ModalityLayout, partition: SubsetPartition) -> np.ndarray:
    partition.validate(layout.n_modalities)
    mask = np.zeros(layout.total_dim)
    for i in partition.a1:
        mask[layout.block(i)] = 1.0
    return mask


def build_multitime(partition: SubsetPartition, t, n_modalities: int | None = None) -> np.ndarray:
    """Per-modality times: ``t`` on generated modalities, 0 on frozen ones.

    ``t`` may be a scalar or a ``(batch,)`` array, giving ``(M,)`` or ``(batch, M)``.
    """
    if n_modalities is None:
        n_modalities = len(partition.a1 | partition.a2)
    partition.validate(n_modalities)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("diffusion time must be > 0; 0 marks frozen modalities")
    ind = np.array([1.0 if i in partition.a1 else 0.0 for i in range(n_modalities)])
    return t[..., None] * ind


def times_per_coordinate(layout: ModalityLayout, tau: np.ndarray) -> np.ndarray:
    """Broadcast a ``(..., M)`` multi-time vector onto ``(..., total_dim)`` coordinates."""
    return np.repeat(tau, layout.dims, axis=-1)


def split(layout: ModalityLayout, z: np.ndarray) -> list[np.ndarray]:
    z = np.asarray(z)
    if z.shape[-1] != layout.total_dim:
        raise ShapeError(f"joint vector has length {z.shape[-1]}, layout expects {layout.total_dim}")
    return [z[..., layout.block(i)] for i in range(layout.n_modalities)]


def compose(layout: ModalityLayout, generated: dict, conditioning: dict) -> np.ndarray:
    """Place generated and conditioning blocks (keyed by modality index) at their offsets."""
    overlap = set(generated) & set(conditioning)
    if overlap:
        raise ShapeError(f"modalities {sorted(overlap)} given twice")
    blocks = {**generated, **conditioning}
    missing = set(range(layout.n_modalities)) - set(blocks)
    if missing:
        raise ShapeError(f"missing blocks for modalities {sorted(missing)}")
    extra = set(blocks) - set(range(layout.n_modalities))
    if extra:
        raise ShapeError(f"unknown modality indices {sorted(extra)}")
    arrays = [np.asarray(blocks[i], dtype=np.float64) for i in range(layout.n_modalities)]
    for i, a in enumerate(arrays):
        if a.shape[-1] != layout.dims[i]:
            raise ShapeError(f"block {i} has dim {a.shape[-1]}, layout expects {layout.dims[i]}")
    lead = np.broadcast_shapes(*(a.shape[:-1] for a in arrays))
    return np.concatenate([np.broadcast_to(a, lead + a.shape[-1:]) for a in arrays], axis=-1)
