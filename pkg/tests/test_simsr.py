import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gcrl_robust import simsr
from gcrl_robust.agents import observation
from gcrl_robust.errors import DegenerateRepresentation
from gcrl_robust.simsr import (SarConfig, measurement_features, sample_deltas, sar_regularizer,
                               simsr_contraction_probe, simsr_loss, simsr_operator)

from oracles import random_batch, small_bundle

positive = arrays(float, 6, elements=st.floats(0.01, 10))


def test_measurement_examples():
    u = np.array([[1.0, 0.0]])
    assert measurement_features(u, u)[0] == 0.0
    assert measurement_features(u, -u)[0] == 2.0
    assert measurement_features(u, np.array([[0.0, 3.0]]))[0] == 1.0


@given(positive, positive)
def test_measurement_bounds_and_symmetry(a, b):
    m = measurement_features(a, b)[0]
    assert 0.0 <= m <= 2.0
    assert m == measurement_features(b, a)[0]
    assert measurement_features(a, a)[0] == pytest.approx(0.0, abs=1e-12)


@given(positive, st.floats(0.01, 100))
def test_measurement_scale_invariant(a, c):
    b = a[::-1].copy()
    assert measurement_features(c * a, b)[0] == pytest.approx(measurement_features(a, b)[0], abs=1e-12)


def test_measurement_zero_row_raises():
    with pytest.raises(DegenerateRepresentation):
        measurement_features(np.zeros(3), np.ones(3))


def test_representation_unit_norm(rng):
    b = small_bundle(rng, width=32)
    z = simsr.representation(b.policy, rng.standard_normal((50, 4)), rng.standard_normal((50, 2)))
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)


def test_measurement_grads_finite_differences(rng):
    u, v = rng.uniform(0.1, 1, (5, 6)), rng.uniform(0.1, 1, (5, 6))
    _, du, dv = simsr._measurement_grads(u, v)
    h = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        num = (measurement_features(u + e, v) - measurement_features(u - e, v)) / (2 * h)
        np.testing.assert_allclose(du[:, i], num, atol=1e-7)
        num = (measurement_features(u, v + e) - measurement_features(u, v - e)) / (2 * h)
        np.testing.assert_allclose(dv[:, i], num, atol=1e-7)


def test_target_examples(rng):
    b = small_bundle(rng, width=16)
    x = np.tile(observation(rng.standard_normal(4), rng.standard_normal(2)), (3, 1))
    t = simsr.simsr_target(b.policy, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], x, x, 0.98)
    np.testing.assert_allclose(t, [0.0, 1.0, 0.0], atol=1e-12)


def test_target_with_orthogonal_successors():
    from gcrl_robust.diffmlp import Mlp
    # identity encoder: features of positive inputs are the inputs themselves
    net = Mlp([np.eye(2), np.ones((1, 2))], [np.zeros(2), np.zeros(1)])
    t = simsr.simsr_target(net, [0.0], [0.0], np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 0.98)
    assert t[0] == pytest.approx(0.98, abs=1e-15)


def test_loss_zero_when_measurement_matches_target(rng):
    b = small_bundle(rng, width=16)
    batch = random_batch(rng, 8)
    # equal rewards and next tuples equal to current tuples: at perm = identity
    # both M and its target vanish
    batch.next_states[...] = batch.states
    value, grads = simsr_loss(b.policy, b.policy, batch, np.arange(8), 0.98)
    assert value == pytest.approx(0.0, abs=1e-20)
    assert all(np.abs(g).max() < 1e-12 for g in grads)


def test_collapsed_encoder_matches_reward_gap(rng):
    b = small_bundle(rng, width=8)
    W, bias = b.policy.weights[0], b.policy.biases[0]
    W[...] = 0.0
    bias[...] = 1.0                        # every tuple maps to the same feature
    batch = random_batch(rng, 10)
    perm = rng.permutation(10)
    value, _ = simsr_loss(b.policy, b.policy, batch, perm, 0.98)
    gap = np.abs(batch.rewards - batch.rewards[perm])
    assert value == pytest.approx(np.mean(gap ** 2), abs=1e-12)


def test_target_branch_is_stop_gradient(rng):
    b = small_bundle(rng, width=16)
    batch = random_batch(rng, 8)
    perm = rng.permutation(8)
    # sharing the online network as target must not add a gradient path
    v1, g1 = simsr_loss(b.policy, b.policy, batch, perm, 0.98)
    v2, g2 = simsr_loss(b.policy, b.policy.copy(), batch, perm, 0.98)
    assert v1 == v2
    for a, c in zip(g1, g2):
        assert a.tobytes() == c.tobytes()
    assert g1[0].shape == b.policy.weights[0].shape and len(g1) == 2


def test_dead_pairs_are_masked_and_counted(rng):
    b = small_bundle(rng, width=8)
    batch = random_batch(rng, 6)
    perm = np.arange(6)[::-1].copy()
    b.policy.biases[0][...] = -1e6          # every encoder output is zero
    stats = {"degenerate_pairs": 0}
    value, grads = simsr_loss(b.policy, b.target_policy, batch, perm, 0.98, stats=stats)
    assert value == 0.0 and stats["degenerate_pairs"] == 6
    assert not any(g.any() for g in grads)


def test_sar_zero_when_tuples_identical(rng):
    b = small_bundle(rng, width=16)
    s, g = rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
    cfg = SarConfig()
    d_s, d_g = sample_deltas(rng, s.shape, cfg), sample_deltas(rng, g.shape, cfg)
    value, _ = sar_regularizer(b.policy, s, g, s, g, (d_s, d_g, d_s, d_g), cfg)
    assert value == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_sar_nonnegative_and_swap_symmetric(seed):
    rng = np.random.default_rng(seed)
    b = small_bundle(rng, width=16)
    s1, g1, s2, g2 = (rng.standard_normal((7, k)) for k in (4, 2, 4, 2))
    cfg = SarConfig(beta=0.7)
    d = [sample_deltas(rng, x.shape, cfg) for x in (s1, g1, s2, g2)]
    v, _ = sar_regularizer(b.policy, s1, g1, s2, g2, d, cfg)
    w, _ = sar_regularizer(b.policy, s2, g2, s1, g1, (d[2], d[3], d[0], d[1]), cfg)
    assert v >= 0.0 and v == pytest.approx(w, rel=1e-14)


def test_sar_beta_zero_drops_goal_term(rng):
    b = small_bundle(rng, width=16)
    s1, g1, s2, g2 = (rng.standard_normal((4, k)) for k in (4, 2, 4, 2))
    cfg = SarConfig(beta=0.0)
    d = [sample_deltas(rng, x.shape, cfg) for x in (s1, g1, s2, g2)]
    v, _ = sar_regularizer(b.policy, s1, g1, s2, g2, d, cfg)
    # goal deltas are irrelevant when beta = 0
    v2, _ = sar_regularizer(b.policy, s1, g1, s2, g2, (d[0], 5 * d[1], d[2], 3 * d[3]), cfg)
    assert v == v2


def test_sample_deltas_in_ball(rng):
    d = sample_deltas(rng, (1000, 3), SarConfig(radius=0.2))
    assert np.all(np.abs(d) <= 0.2) and np.all(np.linalg.norm(d, axis=1) > 0)


def test_sample_deltas_exhausts_budget():
    class ZeroRng:
        def uniform(self, lo, hi, size):
            return np.zeros(size)
    with pytest.raises(DegenerateRepresentation):
        sample_deltas(ZeroRng(), (2, 3), SarConfig())


def test_sar_config_validation():
    for bad in ({"radius": 0.0}, {"beta": -1.0}, {"draws": 0}):
        with pytest.raises(ValueError):
            SarConfig(**bad)


def test_operator_hand_example():
    r = np.array([0.0, 1.0])
    M = np.array([[0.0, 0.5], [0.5, 0.0]])
    T = simsr_operator(r, [1, 0], M, 0.9)
    np.testing.assert_allclose(T, [[0.0, 1.45], [1.45, 0.0]])


def test_contraction_probe_cases(rng):
    r = rng.integers(0, 2, 20).astype(float)
    nxt = rng.integers(0, 20, 20)
    M = rng.uniform(0, 2, (20, 20))
    assert simsr_contraction_probe(r, nxt, M, M, 0.98) == 0.0
    # a constant shift passes through the operator scaled by exactly gamma
    assert simsr_contraction_probe(r, nxt, M, M + 0.25, 0.98) == pytest.approx(0.98, abs=1e-12)


@given(st.integers(0, 2**31))
def test_contraction_probe_bounded_by_gamma(seed):
    rng = np.random.default_rng(seed)
    r = rng.integers(0, 2, 20).astype(float)
    nxt = rng.integers(0, 20, 20)
    M1, M2 = rng.uniform(0, 2, (2, 20, 20))
    assert simsr_contraction_probe(r, nxt, M1, M2, 0.98) <= 0.98 + 1e-12
