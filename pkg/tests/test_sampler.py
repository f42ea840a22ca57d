import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mld.diffusion import DiffusionConfig, GaussianOracle, ScoreNetwork, beta, kernel
from mld.errors import ConfigError, NumericError, ShapeError
from mld.latent import ModalityLayout, SubsetPartition, proper_subsets
from mld.sampler import (SamplerConfig, conditional_generate, em_reverse_step, generate,
                         inpaint_conditional_generate, joint_generate, repaint_schedule)

CFG = DiffusionConfig()


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(n_steps=0)
    for rp in ((0, 1), (1, 0), (2, 11)):
        with pytest.raises(ConfigError):
            SamplerConfig(n_steps=10, repaint=rp)


def test_em_step_pure_drift():
    state = np.array([[1.0, -2.0]])
    out = em_reverse_step(CFG, np.zeros_like(state), state, 0.5, 0.01, np.zeros_like(state))
    assert np.allclose(out, state * (1 + 0.5 * beta(CFG, 0.5) * 0.01), rtol=0, atol=1e-15)


def test_em_step_with_standard_normal_score():
    state = np.array([[0.3, 1.7, -4.0]])
    b, dt = beta(CFG, 0.8), 0.004
    out = em_reverse_step(CFG, lambda s: -s, state, 0.8, dt, np.zeros_like(state))
    assert np.allclose(out, state * (1 - 0.5 * b * dt), rtol=1e-14)


def test_em_step_noise_variance():
    rng = np.random.default_rng(0)
    n, tp, dt = 200_000, 0.3, 0.02
    noise = rng.standard_normal((n, 1))
    out = em_reverse_step(CFG, np.zeros((n, 1)), np.zeros((n, 1)), tp, dt, noise)
    target = beta(CFG, tp) * dt
    # relative standard error of a variance estimate is sqrt(2/n) ~ 0.3%
    assert out.var() == pytest.approx(target, rel=0.015)


def test_em_step_errors():
    s = np.zeros((1, 1))
    with pytest.raises(ValueError):
        em_reverse_step(CFG, s, s, 0.5, 0.0, s)
    with pytest.raises(ValueError):
        em_reverse_step(CFG, s, s, 0.0, 0.1, s)
    with pytest.raises(ValueError):
        em_reverse_step(CFG, s, s, 1.5, 0.1, s)
    with pytest.raises(NumericError):
        em_reverse_step(CFG, np.array([[np.nan]]), s, 0.5, 0.1, s)


def test_repaint_schedule_examples():
    assert repaint_schedule(4, 1, 2) == [0, 1, 2, 3]
    assert repaint_schedule(4, 2, 2) == [0, 1, 0, 1, 2, 3, 2, 3]
    # last window truncated when j does not divide N
    assert repaint_schedule(5, 2, 2) == [0, 1, 0, 1, 2, 3, 2, 3, 4, 4]
    with pytest.raises(ConfigError):
        repaint_schedule(4, 2, 5)


@given(st.integers(1, 60), st.integers(1, 5), st.data())
def test_repaint_schedule_coverage(n, r, data):
    j = data.draw(st.integers(1, n))
    sched = repaint_schedule(n, r, j)
    assert set(sched) == set(range(n))
    assert sched[-1] == n - 1
    assert len(sched) == r * n
    if n % j == 0:
        assert len(sched) == n + (r - 1) * j * (n // j)


def test_sampler_config_schedule_length():
    assert len(SamplerConfig(250).schedule()) == 250
    assert len(SamplerConfig(250, (10, 10)).schedule()) == 2500


def oracle(dims):
    layout = ModalityLayout.from_dims(dims)
    return layout, GaussianOracle(layout, CFG)


def discretized_variance(n_steps):
    """Exact output variance of the EM scheme driven by the N(0, 1) oracle score."""
    dt, v = CFG.T / n_steps, 1.0
    for n in range(n_steps):
        b = float(beta(CFG, CFG.T - n * dt))
        v = (1 - 0.5 * b * dt) ** 2 * v + (0.0 if n == n_steps - 1 else b * dt)
    return v


def test_joint_generate_oracle_recovers_standard_normal():
    layout, net = oracle([2, 1])
    n, N = 20_000, 100
    out = joint_generate(CFG, SamplerConfig(N, seed=1), net, layout, n)
    v = discretized_variance(N)
    assert 1.0 < v < 1.02
    assert np.all(np.abs(out.mean(axis=0)) < 4 * math.sqrt(v / n))
    assert np.allclose(out.var(axis=0), v, rtol=4 * math.sqrt(2 / n))
    off = np.cov(out, rowvar=False)[np.triu_indices(3, 1)]
    assert np.all(np.abs(off) < 4 * v / math.sqrt(n))


def test_single_step_run_is_finite():
    layout, net = oracle([2])
    out = joint_generate(CFG, SamplerConfig(1), net, layout, 5)
    assert out.shape == (5, 2) and np.all(np.isfinite(out))


def small_net(dims, seed=0):
    layout = ModalityLayout.from_dims(dims)
    return layout, ScoreNetwork.create(layout, CFG, np.random.default_rng(seed), width=16, n_blocks=1, embed_dim=4)


@pytest.mark.parametrize("method", ["multitime", "inpaint"])
def test_pinned_seed_determinism(method):
    layout, net = small_net([2, 3])
    part = SubsetPartition.conditioning_on({1}, 2)
    cond = {1: np.array([0.5, -1.0, 2.0])}
    sc = SamplerConfig(12, (2, 3), seed=7)
    a = generate(method, CFG, sc, net, layout, part, cond, 6)
    b = generate(method, CFG, sc, net, layout, part, cond, 6)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("repaint", [None, (3, 4)])
def test_empty_conditioning_equals_joint(repaint):
    layout, net = small_net([2, 1, 3])
    sc = SamplerConfig(16, repaint, seed=3)
    none = SubsetPartition.conditioning_on(set(), 3)
    ref = joint_generate(CFG, sc, net, layout, 8)
    assert conditional_generate(CFG, sc, net, layout, none, {}, 8).tobytes() == ref.tobytes()
    assert inpaint_conditional_generate(CFG, sc, net, layout, none, {}, 8).tobytes() == ref.tobytes()
    assert generate("multitime", CFG, sc, net, layout, none, {}, 8).tobytes() == ref.tobytes()


@pytest.mark.parametrize("dims", [[2, 3], [1, 2, 2]])
@pytest.mark.parametrize("repaint", [None, (2, 5)])
def test_frozen_blocks_bit_exact_every_step(dims, repaint):
    layout, net = small_net(dims)
    M = len(dims)
    rng = np.random.default_rng(0)
    for a2 in proper_subsets(M):
        part = SubsetPartition.conditioning_on(a2, M)
        cond = {i: rng.normal(size=(4, layout.dims[i])) for i in a2}
        traj = []
        out = conditional_generate(CFG, SamplerConfig(10, repaint, seed=1), net, layout, part, cond, 4, trajectory=traj)
        assert len(traj) == len(SamplerConfig(10, repaint).schedule())
        for i in a2:
            lo = layout.offsets[i]
            cols = slice(lo, lo + layout.dims[i])
            for _, state in traj + [(0.0, out)]:
                assert state[:, cols].tobytes() == cond[i].tobytes()


def test_conditioning_must_match_partition():
    layout, net = small_net([1, 1])
    part = SubsetPartition.conditioning_on({1}, 2)
    with pytest.raises(ShapeError):
        conditional_generate(CFG, SamplerConfig(3), net, layout, part, {0: np.zeros(1)}, 2)
    with pytest.raises(ConfigError):
        generate("bogus", CFG, SamplerConfig(3), net, layout, part, {1: np.zeros(1)}, 2)


class Spy:
    """Zero score that records the state it was queried with."""

    def __init__(self):
        self.seen = []

    def score(self, r, tau):
        self.seen.append((float(tau[0, 0]), r.copy()))
        return np.zeros_like(r)


def test_inpaint_rediffuses_conditioning_with_kernel_moments():
    layout = ModalityLayout.from_dims([1, 1])
    spy = Spy()
    z2 = 1.3
    part = SubsetPartition.conditioning_on({1}, 2)
    inpaint_conditional_generate(CFG, SamplerConfig(10, seed=0), spy, layout, part, {1: np.array([z2])}, 50_000)
    for t, state in spy.seen:
        k = kernel(CFG, t)
        col = state[:, 1]
        assert col.mean() == pytest.approx(k.mean_coeff * z2, abs=4 * math.sqrt(k.variance / len(col)) + 1e-12)
        assert col.var() == pytest.approx(k.variance, rel=0.03)


def test_repaint_jump_backs_keep_oracle_marginals():
    # with N(0, I) data every marginal along the reverse path is N(0, I)
    layout, net = oracle([2])
    traj = []
    joint_generate(CFG, SamplerConfig(200, (3, 10), seed=2), net, layout, 20_000, trajectory=traj)
    for _, state in traj[::25]:
        assert np.allclose(state.var(axis=0), 1.0, rtol=0.1)
        assert np.all(np.abs(state.mean(axis=0)) < 0.05)


def test_multitime_oracle_conditional_is_independent_block():
    # independent N(0, I) blocks: conditioning must not move the generated block
    layout, net = oracle([1, 1])
    part = SubsetPartition.conditioning_on({1}, 2)
    out = conditional_generate(CFG, SamplerConfig(100, seed=0), net, layout, part, {1: np.array([2.0])}, 10_000)
    assert abs(out[:, 0].mean()) < 0.05
    assert out[:, 0].var() == pytest.approx(1.0, rel=0.05)
    assert np.all(out[:, 1] == 2.0)
