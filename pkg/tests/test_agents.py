import dataclasses

import numpy as np
import pytest

from gcrl_robust import agents, gcenv
from gcrl_robust.agents import AgentBundle, AgentConfig, ObsScaler, Schedule
from gcrl_robust.diffmlp import forward
from gcrl_robust.errors import DimensionError, NumericalError
from gcrl_robust.gcenv import Batch

from oracles import directional_error, loss_cases, random_batch, small_bundle, straight_line


@pytest.mark.parametrize("seed", range(6))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(10_000 + seed)
    for name, f, arrays, grads in loss_cases(seed):
        assert directional_error(f, arrays, grads, rng) < 1e-4, name


def test_bundle_shapes():
    env = gcenv.make_env("PointSlide")
    b = AgentBundle.build(env, AgentConfig(algo="gofar", hidden=32))
    assert b.policy.dims == [8, 256, 32, 32, 2]
    assert b.critic.dims == [10, 32, 32, 32, 1]
    assert b.aux.discriminator.dims == [4, 32, 32, 1]
    assert b.aux.value.dims == [8, 32, 32, 1]
    assert b.policy == b.target_policy and b.critic == b.target_critic


def test_act_zero_weights_gives_zero_action():
    b = small_bundle(np.random.default_rng(0))
    for p in b.policy.params:
        p[...] = 0.0
    np.testing.assert_array_equal(agents.act(b, np.ones(4), np.ones(2)), np.zeros(2))


def test_act_matches_straight_line(rng):
    b = small_bundle(rng)
    s, g = rng.standard_normal(4), rng.standard_normal(2)
    ref = np.tanh(straight_line(b.policy.weights, b.policy.biases, np.concatenate([s, g])))
    np.testing.assert_allclose(agents.act(b, s, g), ref, rtol=1e-12)


def test_act_bounds_and_dims(rng):
    b = small_bundle(rng)
    for p in b.policy.params:
        p *= 50
    a = agents.act(b, rng.standard_normal((100, 4)), rng.standard_normal((100, 2)))
    assert np.all(np.abs(a) <= 1.0)
    with pytest.raises(DimensionError):
        agents.act(b, np.zeros(3), np.zeros(2))


def test_critic_loss_hand_values():
    b = small_bundle(np.random.default_rng(1))
    for net in (b.critic, b.target_critic):
        for p in net.params:
            p[...] = 0.0
    one = Batch(np.zeros((1, 4)), np.zeros((1, 2)), np.zeros((1, 4)), np.zeros((1, 2)), np.ones(1), np.zeros((1, 4)))
    assert agents.ddpg_critic_loss(b, one).value == 1.0
    zero = dataclasses.replace(one, rewards=np.zeros(1))
    assert agents.ddpg_critic_loss(b, zero).value == 0.0


def test_bellman_target_is_clipped(rng):
    b = small_bundle(rng)
    b.target_critic.biases[-1][...] = 1e3
    y = agents.bellman_target(b, random_batch(rng))
    assert np.all(y <= 1.0 / (1.0 - b.gamma))


def test_losses_are_permutation_invariant(rng):
    b = small_bundle(rng)
    batch = random_batch(rng, 9)
    perm = rng.permutation(9)
    other = batch.take(perm)
    for fn in (agents.ddpg_critic_loss, agents.ddpg_actor_loss, agents.gcsl_loss):
        assert fn(b, batch).value == pytest.approx(fn(b, other).value, rel=1e-13)


def test_actor_loss_constant_critic(rng):
    b = small_bundle(rng)
    for p in b.critic.params:
        p[...] = 0.0
    b.critic.biases[-1][...] = 2.5
    loss = agents.ddpg_actor_loss(b, random_batch(rng))
    assert loss.value == -2.5
    assert not any(g.any() for g in loss.grads["policy"])


def test_gcsl_hand_values(rng):
    b = small_bundle(rng)
    for p in b.policy.params:
        p[...] = 0.0
    one = Batch(np.zeros((1, 4)), np.array([[1.0, 0.0]]), np.zeros((1, 4)), np.zeros((1, 2)), np.zeros(1),
                np.zeros((1, 4)))
    assert agents.gcsl_loss(b, one).value == 0.5
    batch = random_batch(rng)
    b2 = small_bundle(rng)
    batch = dataclasses.replace(batch, actions=agents.act(b2, batch.states, batch.goals))
    assert agents.gcsl_loss(b2, batch).value == 0.0


def test_chi2_conjugate_values():
    assert agents.chi2_conjugate(0.0) == 0.0
    assert agents.chi2_conjugate_grad(0.0) == 1.0
    assert agents.chi2_conjugate(2.0) == 3.0


def test_gofar_zero_value_and_reward(rng):
    g = small_bundle(rng, "gofar")
    for net in (g.aux.value, g.aux.discriminator):
        for p in net.params:
            p[...] = 0.0                    # V = 0 and discriminator c = 1/2, so R = 0
    batch = random_batch(rng)
    out = agents.gofar_losses(g, batch)
    assert out.value.value == 0.0
    # unit weights: the policy term is plain behaviour cloning
    assert out.policy.value == agents.gcsl_loss(g, batch).value


def test_gofar_discriminator_separates_and_counts_clamps(rng):
    g = small_bundle(rng, "gofar")
    aux = g.aux
    pos = np.concatenate([np.full((5, 2), 1.0), np.zeros((5, 2))], axis=1)
    neg = np.concatenate([np.full((5, 2), -1.0), np.zeros((5, 2))], axis=1)
    for p in aux.discriminator.params:
        p[...] = 0.0
    W = aux.discriminator.weights
    W[0][0, 0], W[0][1, 0] = 1.0, -1.0     # hidden units relu(x) and relu(-x)
    W[1][0, 0], W[1][1, 1] = 1.0, 1.0
    losses = []
    for scale in (1.0, 10.0, 1e4):
        W[2][0, 0], W[2][0, 1] = scale, -scale     # logit = scale * x
        loss, clamped = agents.discriminator_loss(aux, pos, neg)
        losses.append(loss.value)
    assert losses[0] > losses[1] > losses[2]
    assert clamped == 10                   # both sides saturate under the huge scale
    assert losses[2] == pytest.approx(-2 * np.log(1 - 1e-6), abs=1e-12)


def test_polyak_trail(rng):
    b = small_bundle(rng)
    for p in b.policy.params + b.critic.params:
        p += rng.standard_normal(p.shape)
    old = [t.copy() for t in b.target_policy.params + b.target_critic.params]
    online = [p.copy() for p in b.policy.params + b.critic.params]
    b.polyak(0.05)
    for t, o, p in zip(b.target_policy.params + b.target_critic.params, old, online):
        np.testing.assert_array_equal(t, (1 - 0.05) * o + 0.05 * p)


def test_checkpoint_round_trip(tmp_path, rng):
    b = small_bundle(rng, "gofar")
    b.scaler = ObsScaler.fit(rng.standard_normal((10, 4)), b.goal_slice)
    b.manifest["note"] = "x"
    b.save(tmp_path / "a.ckpt")
    back = AgentBundle.load(tmp_path / "a.ckpt")
    assert back.to_bytes() == b.to_bytes()
    np.testing.assert_array_equal(back.scaler.state_std, b.scaler.state_std)
    for k, net in b.networks().items():
        assert back.networks()[k] == net


def test_identity_scaler_is_bitwise_noop(rng):
    sc = ObsScaler.identity(4, (0, 2))
    s, g = rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
    ss, gg = sc.observe(s, g)
    assert ss.tobytes() == s.tobytes() and gg.tobytes() == g.tobytes()
    assert sc.is_identity


def test_fitted_scaler_standardises(rng):
    x = rng.normal(3.0, 2.0, size=(4000, 4))
    sc = ObsScaler.fit(x, (0, 2))
    z = sc.states(x)
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(0), 1, atol=1e-12)
    np.testing.assert_array_equal(sc.goal_std, sc.state_std[:2])


@pytest.fixture(scope="module")
def dataset():
    return gcenv.collect_dataset(gcenv.make_env("PointReach"), {"random_fraction": 0.9, "expert_fraction": 0.1},
                                 40, 0)


TINY = Schedule(epochs=2, cycles=2, batches=3, batch_size=32)


@pytest.mark.parametrize("algo", agents.ALGORITHMS)
def test_training_is_deterministic(dataset, algo):
    env = gcenv.make_env("PointReach")
    cfg = AgentConfig(algo=algo, encoder_width=16, hidden=16)
    a, curve_a = agents.train(AgentBundle.build(env, cfg, seed=3), dataset, TINY)
    b, curve_b = agents.train(AgentBundle.build(env, cfg, seed=3), dataset, TINY)
    assert a.to_bytes() == b.to_bytes()
    assert curve_a == curve_b and len(curve_a) == 2


def test_zero_learning_rate_leaves_networks(dataset):
    env = gcenv.make_env("PointReach")
    b = AgentBundle.build(env, AgentConfig(encoder_width=8, hidden=8), seed=1)
    before = {k: n.copy() for k, n in b.networks().items()}
    sch = dataclasses.replace(TINY, lr_actor=0.0, lr_critic=0.0)
    agents.train(b, dataset, sch)
    for k, n in b.networks().items():
        if k.startswith("target"):
            # polyak towards an identical online copy only rounds: (1-tau) t + tau t
            for p, q in zip(n.params, before[k].params):
                np.testing.assert_allclose(p, q, rtol=1e-15, atol=0)
        else:
            assert n == before[k], k


def test_epoch_checkpoints_written(dataset, tmp_path):
    env = gcenv.make_env("PointReach")
    b = AgentBundle.build(env, AgentConfig(encoder_width=8, hidden=8), seed=1)
    agents.train(b, dataset, TINY, checkpoint_dir=tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["epoch_000.ckpt", "epoch_001.ckpt"]
    last = AgentBundle.load(tmp_path / "epoch_001.ckpt")
    for k, net in b.networks().items():
        assert last.networks()[k] == net


def test_nan_loss_aborts_with_checkpoint(dataset):
    env = gcenv.make_env("PointReach")
    b = AgentBundle.build(env, AgentConfig(encoder_width=8, hidden=8), seed=1)
    b.critic.biases[-1][...] = np.nan
    with pytest.raises(NumericalError) as info:
        agents.train(b, dataset, TINY)
    assert info.value.checkpoint is not None
    assert AgentBundle.from_bytes(info.value.checkpoint).dim_state == 4


def test_scaler_fitted_on_dataset_when_normalising(dataset):
    env = gcenv.make_env("PointReach")
    b = AgentBundle.build(env, AgentConfig(encoder_width=8, hidden=8), seed=1)
    agents.train(b, dataset, TINY)
    flat = dataset.states.reshape(-1, 4)
    np.testing.assert_allclose(b.scaler.state_mean, flat.mean(0))
    off = AgentBundle.build(env, AgentConfig(encoder_width=8, hidden=8, normalize=False), seed=1)
    agents.train(off, dataset, TINY)
    assert off.scaler.is_identity


def test_act_uses_scaler(rng):
    b = small_bundle(rng)
    b.scaler = ObsScaler(np.arange(4.0), np.full(4, 2.0), (0, 2))
    s, g = rng.standard_normal(4), rng.standard_normal(2)
    x = np.concatenate([(s - np.arange(4.0)) / 2, (g - np.arange(2.0)) / 2])
    np.testing.assert_allclose(agents.act(b, s, g), np.tanh(forward(b.policy, x)[0]), rtol=1e-14)
