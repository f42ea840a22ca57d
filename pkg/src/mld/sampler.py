"""Reverse-time Euler-Maruyama generation on the joint latent.

Integration runs over step indices ``n = 0..N-1`` at ``t' = T - n dt``; the
last step of a run adds no noise. A RePaint schedule replays windows of step
indices; every jump back re-noises the state with the forward kernel between
the two time levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionConfig, beta, kernel
from .errors import ConfigError, NumericError, ShapeError
from .latent import ModalityLayout, SubsetPartition, build_mask, compose


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 250
    repaint: tuple[int, int] | None = None  # (resample_times r, jump j)
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("sampler n_steps must be >= 1")
        if self.repaint is not None:
            r, j = self.repaint
            if r < 1 or not 1 <= j <= self.n_steps:
                raise ConfigError(f"repaint needs r >= 1 and 1 <= j <= N, got r={r}, j={j}")

    def schedule(self) -> list[int]:
        if self.repaint is None:
            return list(range(self.n_steps))
        return repaint_schedule(self.n_steps, *self.repaint)


def repaint_schedule(n_steps: int, resample_times: int, jump: int) -> list[int]:
    """Step indices where each window of ``jump`` consecutive steps is played ``resample_times`` times.

    When ``jump`` does not divide ``n_steps`` the last window is shorter.
    """
    if n_steps < 1 or resample_times < 1 or not 1 <= jump <= n_steps:
        raise ConfigError(f"invalid repaint schedule N={n_steps}, r={resample_times}, j={jump}")
    out = []
    for start in range(0, n_steps, jump):
        window = list(range(start, min(start + jump, n_steps)))
        out += window * resample_times
    return out


def em_reverse_step(config: DiffusionConfig, score_eval, state, t_prime: float, dt: float, noise):
    """``state + dt [beta/2 state + beta score] + sqrt(beta dt) noise`` at ``beta = beta(t')``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not 0 < t_prime <= config.T * (1 + 1e-12):
        raise ValueError(f"t' must lie in (0, {config.T}], got {t_prime}")
    b = float(beta(config, t_prime))
    score = score_eval(state) if callable(score_eval) else score_eval
    out = state + dt * (0.5 * b * state + b * score) + np.sqrt(b * dt) * noise
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite sampler state at t'={t_prime:.6g}")
    return out


def _renoise(config: DiffusionConfig, state, t_from: float, t_to: float, noise):
    """Forward kernel from level ``t_from`` up to ``t_to >= t_from``."""
    t_from, t_to = (min(max(t, 0.0), config.T) for t in (t_from, t_to))  # absorb float round-off at the ends
    ratio = kernel(config, t_to).mean_coeff / kernel(config, t_from).mean_coeff
    return ratio * state + np.sqrt(max(0.0, 1.0 - ratio ** 2)) * noise


def _walk(config, sampler_config):
    """Yield ``(n, t', dt, is_last, jump_to)`` per schedule entry; ``jump_to`` marks a jump back."""
    sched = sampler_config.schedule()
    dt = config.T / sampler_config.n_steps
    for p, n in enumerate(sched):
        last = p == len(sched) - 1
        nxt = None if last else sched[p + 1]
        jump_to = nxt if (nxt is not None and nxt <= n) else None
        yield n, config.T - n * dt, dt, last, jump_to


def joint_generate(config: DiffusionConfig, sampler_config: SamplerConfig, score_net,
                   layout: ModalityLayout, count: int, rng=None, trajectory: list | None = None):
    """Sample ``count`` joint latents from ``N(0, I)`` integrated with every modality at the same time."""
    rng = np.random.default_rng(sampler_config.seed) if rng is None else rng
    D, M = layout.total_dim, layout.n_modalities
    state = rng.standard_normal((count, D))
    for n, tp, dt, last, jump_to in _walk(config, sampler_config):
        tau = np.full((count, M), tp)
        noise = np.zeros((count, D)) if last else rng.standard_normal((count, D))
        state = em_reverse_step(config, lambda s: score_net.score(s, tau), state, tp, dt, noise)
        if jump_to is not None:
            state = _renoise(config, state, tp - dt, config.T - jump_to * dt, rng.standard_normal((count, D)))
        if trajectory is not None:
            trajectory.append((tp - dt, state.copy()))
    return state


def _initial_state(layout, partition, conditioning, count, rng):
    partition.validate(layout.n_modalities)
    if set(conditioning) != set(partition.a2):
        raise ShapeError(f"conditioning blocks {sorted(conditioning)} do not match a2 {sorted(partition.a2)}")
    a1 = sorted(partition.a1)
    draws = rng.standard_normal((count, layout.dim_of(a1)))
    generated, off = {}, 0
    for i in a1:
        generated[i] = draws[:, off:off + layout.dims[i]]
        off += layout.dims[i]
    cond = {i: np.broadcast_to(np.asarray(v, dtype=np.float64), (count, layout.dims[i])) for i, v in conditioning.items()}
    return compose(layout, generated, cond)


def conditional_generate(config: DiffusionConfig, sampler_config: SamplerConfig, score_net,
                         layout: ModalityLayout, partition: SubsetPartition, conditioning: dict,
                         count: int, rng=None, trajectory: list | None = None):
    """Multi-time conditional generation with the conditioning blocks frozen.

    ``conditioning`` maps each index in ``partition.a2`` to a latent block of
    shape ``(dim,)`` or ``(count, dim)``. Returns the final joint state.
    """
    rng = np.random.default_rng(sampler_config.seed) if rng is None else rng
    D = layout.total_dim
    r0 = _initial_state(layout, partition, conditioning, count, rng)
    live = build_mask(layout, partition) > 0
    ind = np.array([1.0 if i in partition.a1 else 0.0 for i in range(layout.n_modalities)])
    state = r0.copy()
    for n, tp, dt, last, jump_to in _walk(config, sampler_config):
        tau = np.broadcast_to(tp * ind, (count, layout.n_modalities))
        noise = np.zeros((count, D)) if last else rng.standard_normal((count, D))
        stepped = em_reverse_step(config, lambda s: score_net.score(s, tau), state, tp, dt, noise)
        state = np.where(live, stepped, r0)
        if jump_to is not None:
            renoised = _renoise(config, state, tp - dt, config.T - jump_to * dt, rng.standard_normal((count, D)))
            state = np.where(live, renoised, r0)
        if trajectory is not None:
            trajectory.append((tp - dt, state.copy()))
    return state


def inpaint_conditional_generate(config: DiffusionConfig, sampler_config: SamplerConfig, score_net,
                                 layout: ModalityLayout, partition: SubsetPartition, conditioning: dict,
                                 count: int, rng=None, trajectory: list | None = None):
    """Conditional generation with an unconditional score: the conditioning blocks are
    re-diffused to the current noise level before every step."""
    rng = np.random.default_rng(sampler_config.seed) if rng is None else rng
    D, M = layout.total_dim, layout.n_modalities
    r0 = _initial_state(layout, partition, conditioning, count, rng)
    live = build_mask(layout, partition) > 0
    frozen_cols = np.flatnonzero(~live)
    state = r0.copy()
    for n, tp, dt, last, jump_to in _walk(config, sampler_config):
        k = kernel(config, tp)
        bar = state.copy()
        bar[:, frozen_cols] = k.mean_coeff * r0[:, frozen_cols] + np.sqrt(k.variance) * rng.standard_normal((count, frozen_cols.size))
        state = np.where(live, state, bar)
        tau = np.full((count, M), tp)
        noise = np.zeros((count, D)) if last else rng.standard_normal((count, D))
        state = em_reverse_step(config, lambda s: score_net.score(s, tau), state, tp, dt, noise)
        if jump_to is not None:
            state = _renoise(config, state, tp - dt, config.T - jump_to * dt, rng.standard_normal((count, D)))
        if trajectory is not None:
            trajectory.append((tp - dt, state.copy()))
    return state


def generate(method: str, config, sampler_config, score_net, layout, partition, conditioning, count, rng=None):
    """Dispatch on ``method`` ('multitime' or 'inpaint'); empty a2 means joint generation."""
    if method == "multitime":
        if not partition.a2:
            return joint_generate(config, sampler_config, score_net, layout, count, rng)
        return conditional_generate(config, sampler_config, score_net, layout, partition, conditioning, count, rng)
    if method == "inpaint":
        return inpaint_conditional_generate(config, sampler_config, score_net, layout, partition, conditioning, count, rng)
    raise ConfigError(f"unknown sampling method {method!r}")
