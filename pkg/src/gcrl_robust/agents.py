"""Offline goal-conditioned agents: DDPG (+HER), GCSL and a GoFar-style learner.

The policy is a single 4-layer :class:`~gcrl_robust.diffmlp.Mlp` whose first
layer is the encoder (its ReLU output is the "layer 1" representation) and
whose remaining three layers form the actor; ``tanh`` squashes the output into
the action box.  The critic is a separate 4-layer net on ``<s, g> + a``.

Every loss function returns a :class:`Loss` holding the scalar value and the
parameter gradients for each network it touches, keyed by network name.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffmlp
from .diffmlp import AdamState, Mlp, adam_step, backward, forward, grad_input
from .errors import DimensionError, NumericalError
from .gcenv import GAMMA, HindsightSampler

log = logging.getLogger(__name__)

ALGORITHMS = ("ddpg", "gcsl", "gofar")
CHECKPOINT_MAGIC = b"GCAG"
CHECKPOINT_VERSION = 1
CLAMP = 1e-6


@dataclass
class AgentConfig:
    algo: str = "ddpg"
    encoder_width: int = 256
    hidden: int = 256
    gamma: float = GAMMA
    use_bias: bool = True
    clip_target: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}, got {self.algo!r}")


STD_FLOOR = 1e-2


@dataclass
class ObsScaler:
    """Frozen affine map from environment tuples to network inputs.

    Goals share the statistics of the achieved-goal slice of the state, so the
    achieved part of a scaled state and a scaled goal stay comparable.  The
    identity scaler (zero mean, unit std) leaves inputs bit-for-bit unchanged.
    """
    state_mean: np.ndarray
    state_std: np.ndarray
    goal_slice: tuple

    @classmethod
    def identity(cls, dim_state, goal_slice):
        return cls(np.zeros(dim_state), np.ones(dim_state), tuple(goal_slice))

    @classmethod
    def fit(cls, states, goal_slice):
        flat = np.asarray(states, dtype=np.float64).reshape(-1, np.shape(states)[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR), tuple(goal_slice))

    @property
    def goal_mean(self):
        return self.state_mean[self.goal_slice[0]:self.goal_slice[1]]

    @property
    def goal_std(self):
        return self.state_std[self.goal_slice[0]:self.goal_slice[1]]

    @property
    def is_identity(self):
        return not self.state_mean.any() and bool(np.all(self.state_std == 1.0))

    def states(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def goals(self, g):
        return (np.asarray(g, dtype=np.float64) - self.goal_mean) / self.goal_std

    def observe(self, s, g):
        return self.states(s), self.goals(g)

    def batch(self, b):
        """Scale every state and goal field of a :class:`~gcrl_robust.gcenv.Batch`."""
        return dataclasses.replace(b, states=self.states(b.states), next_states=self.states(b.next_states),
                                   goals=self.goals(b.goals), init_states=self.states(b.init_states))

    def to_dict(self):
        return {"state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist()}

    @classmethod
    def from_dict(cls, d, goal_slice):
        return cls(np.asarray(d["state_mean"], dtype=np.float64),
                   np.asarray(d["state_std"], dtype=np.float64), tuple(goal_slice))


@dataclass
class GoFarAux:
    discriminator: Mlp   # [achieved goal, goal] -> logit
    value: Mlp           # <s, g> -> V

    def copy(self):
        return GoFarAux(self.discriminator.copy(), self.value.copy())


@dataclass
class AgentBundle:
    dim_state: int
    dim_goal: int
    dim_action: int
    config: AgentConfig
    policy: Mlp
    critic: Mlp
    target_policy: Mlp
    target_critic: Mlp
    aux: GoFarAux | None = None
    goal_slice: tuple = (0, 0)
    manifest: dict = field(default_factory=dict)
    scaler: ObsScaler | None = None

    def __post_init__(self):
        if self.scaler is None:
            self.scaler = ObsScaler.identity(self.dim_state, self.goal_slice)

    @classmethod
    def build(cls, env, config=None, seed=0):
        config = config or AgentConfig()
        rng = np.random.default_rng([int(seed), 0])
        dsg, da = env.dim_state + env.dim_goal, env.dim_action
        w, h = config.encoder_width, config.hidden
        policy = Mlp.init([dsg, w, h, h, da], rng, config.use_bias, seed_lineage=(seed, 0))
        critic = Mlp.init([dsg + da, h, h, h, 1], rng, config.use_bias, seed_lineage=(seed, 1))
        aux = None
        if config.algo == "gofar":
            aux = GoFarAux(
                Mlp.init([2 * env.dim_goal, h, h, 1], rng, config.use_bias, seed_lineage=(seed, 2)),
                Mlp.init([dsg, h, h, 1], rng, config.use_bias, seed_lineage=(seed, 3)),
            )
        gs = env.goal_slice
        return cls(env.dim_state, env.dim_goal, da, config, policy, critic, policy.copy(),
                   critic.copy(), aux, (gs.start, gs.stop))

    @property
    def algo(self):
        return self.config.algo

    @property
    def gamma(self):
        return self.config.gamma

    @property
    def dim_input(self):
        return self.dim_state + self.dim_goal

    def achieved(self, states):
        return states[..., self.goal_slice[0]:self.goal_slice[1]]

    def networks(self):
        nets = {"policy": self.policy, "critic": self.critic,
                "target_policy": self.target_policy, "target_critic": self.target_critic}
        if self.aux is not None:
            nets["discriminator"] = self.aux.discriminator
            nets["value"] = self.aux.value
        return nets

    def copy(self):
        return AgentBundle(
            self.dim_state, self.dim_goal, self.dim_action, AgentConfig(**asdict(self.config)),
            self.policy.copy(), self.critic.copy(), self.target_policy.copy(),
            self.target_critic.copy(), None if self.aux is None else self.aux.copy(),
            self.goal_slice, json.loads(json.dumps(self.manifest)),
            ObsScaler.from_dict(self.scaler.to_dict(), self.goal_slice),
        )

    def polyak(self, tau):
        for online, target in ((self.policy, self.target_policy), (self.critic, self.target_critic)):
            for p, t in zip(online.params, target.params):
                t[...] = (1.0 - tau) * t + tau * p

    def to_bytes(self):
        sections = {k: diffmlp.mlp_to_bytes(n) for k, n in self.networks().items()}
        manifest = {
            "dims": [self.dim_state, self.dim_goal, self.dim_action],
            "goal_slice": list(self.goal_slice),
            "config": asdict(self.config),
            "scaler": self.scaler.to_dict(),
            "pipeline": self.manifest,
            "sections": [[k, len(v)] for k, v in sections.items()],
        }
        head = json.dumps(manifest, sort_keys=True).encode()
        return b"".join([CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(head)), head,
                         *sections.values()])

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError("not an agent checkpoint")
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported agent checkpoint version {version}")
        manifest = json.loads(data[10:10 + hlen])
        off = 10 + hlen
        nets = {}
        for name, length in manifest["sections"]:
            nets[name] = diffmlp.mlp_from_bytes(data[off:off + length])
            off += length
        aux = None
        if "value" in nets:
            aux = GoFarAux(nets["discriminator"], nets["value"])
        ds, dg, da = manifest["dims"]
        return cls(ds, dg, da, AgentConfig(**manifest["config"]), nets["policy"], nets["critic"],
                   nets["target_policy"], nets["target_critic"], aux, tuple(manifest["goal_slice"]),
                   manifest["pipeline"], ObsScaler.from_dict(manifest["scaler"], manifest["goal_slice"]))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def observation(states, goals):
    return np.concatenate([np.atleast_2d(states), np.atleast_2d(goals)], axis=-1)


def policy_forward(policy, x):
    """``tanh(policy(x))`` and the tape of the underlying linear-output net."""
    pre, tape = forward(policy, x)
    return np.tanh(pre), tape


def act(bundle, states, goals):
    """Deterministic action for environment tuples (scaled on the way in)."""
    if np.shape(states)[-1] != bundle.dim_state or np.shape(goals)[-1] != bundle.dim_goal:
        raise DimensionError(f"tuple dims {np.shape(states)[-1]}+{np.shape(goals)[-1]} do not match "
                             f"{bundle.dim_state}+{bundle.dim_goal}")
    return act_observed(bundle, *bundle.scaler.observe(states, goals))


def act_observed(bundle, states, goals):
    """``tanh(actor(encoder(<s, g>)))`` on already-scaled network inputs."""
    single = np.ndim(states) == 1
    x = observation(states, goals)
    if x.shape[-1] != bundle.dim_input:
        raise DimensionError(f"observation dim {x.shape[-1]} != {bundle.dim_input}")
    a, _ = policy_forward(bundle.policy, x)
    return a[0] if single else a


def make_policy(bundle):
    return lambda s, g: act(bundle, s, g)


@dataclass
class Loss:
    value: float
    grads: dict

    def scaled(self, c):
        return Loss(self.value * c, {k: [c * g for g in v] for k, v in self.grads.items()})


def mix_losses(clean, adv, mode="mixed"):
    """Average clean and adversarial terms (``mixed``) or keep only ``adv``."""
    if mode == "exclusive":
        return adv
    grads = {k: [0.5 * (a + b) for a, b in zip(clean.grads[k], adv.grads[k])] for k in clean.grads}
    return Loss(0.5 * (clean.value + adv.value), grads)


def _nonempty(batch):
    if len(batch) == 0:
        raise ValueError("empty minibatch")


# --- DDPG -------------------------------------------------------------------


def bellman_target(bundle, batch):
    xn = observation(batch.next_states, batch.goals)
    an, _ = policy_forward(bundle.target_policy, xn)
    qn = forward(bundle.target_critic, np.concatenate([xn, an], axis=-1))[0][:, 0]
    y = batch.rewards + bundle.gamma * qn
    if bundle.config.clip_target:
        y = np.clip(y, 0.0, 1.0 / (1.0 - bundle.gamma))
    return y


def ddpg_critic_loss(bundle, batch, obs=None, target=None):
    """Mean squared TD error against ``r + gamma * Qbar(s', pibar(s', g))``.

    ``obs`` optionally replaces the ``(states, goals)`` the online critic sees;
    the Bellman target always uses the clean next state and is held constant.
    """
    _nonempty(batch)
    y = bellman_target(bundle, batch) if target is None else target
    s, g = (batch.states, batch.goals) if obs is None else obs
    q, tape = forward(bundle.critic, np.concatenate([observation(s, g), batch.actions], axis=-1))
    diff = q[:, 0] - y
    n = diff.shape[0]
    _, grads = backward(bundle.critic, tape, (2.0 / n) * diff[:, None])
    return Loss(float(np.mean(diff * diff)), {"critic": grads})


def ddpg_actor_loss(bundle, batch, obs=None):
    """``-mean Q(<s, g>, pi(<s, g>))``; gradients reach the policy only."""
    _nonempty(batch)
    s, g = (batch.states, batch.goals) if obs is None else obs
    x = observation(s, g)
    a, ptape = policy_forward(bundle.policy, x)
    q, ctape = forward(bundle.critic, np.concatenate([x, a], axis=-1))
    n = q.shape[0]
    gin = grad_input(bundle.critic, ctape, np.full((n, 1), -1.0 / n))
    ga = gin[:, bundle.dim_input:] * (1.0 - a * a)
    _, grads = backward(bundle.policy, ptape, ga)
    return Loss(float(-np.mean(q)), {"policy": grads})


# --- GCSL -------------------------------------------------------------------


def gcsl_loss(bundle, batch, obs=None, weights=None):
    """Behaviour cloning ``mean ||pi(s, g) - a||^2`` (mean over rows and coords).

    ``weights`` turns it into the per-row weighted form used by GoFar.
    """
    _nonempty(batch)
    s, g = (batch.states, batch.goals) if obs is None else obs
    a, tape = policy_forward(bundle.policy, observation(s, g))
    diff = a - batch.actions
    n, d = diff.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    value = float(np.sum(w[:, None] * diff * diff) / (n * d))
    cot = (2.0 / (n * d)) * w[:, None] * diff * (1.0 - a * a)
    _, grads = backward(bundle.policy, tape, cot)
    return Loss(value, {"policy": grads})


# --- GoFar ------------------------------------------------------------------


def chi2_conjugate(y):
    return y + 0.25 * y * y


def chi2_conjugate_grad(y):
    return 1.0 + 0.5 * y


@dataclass
class GoFarLosses:
    discriminator: Loss
    value: Loss
    policy: Loss
    clamped: int


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def discriminator_loss(aux, positives, negatives):
    """Logistic loss: ``-mean log c(pos) - mean log(1 - c(neg))``.

    Outputs are clamped to ``[1e-6, 1 - 1e-6]``; clamped entries contribute no
    gradient and are counted.
    """
    net = aux.discriminator
    zp, tp = forward(net, positives)
    zn, tn = forward(net, negatives)
    cp, cn = _sigmoid(zp[:, 0]), _sigmoid(zn[:, 0])
    okp = (cp >= CLAMP) & (cp <= 1 - CLAMP)
    okn = (cn >= CLAMP) & (cn <= 1 - CLAMP)
    cp_c, cn_c = np.clip(cp, CLAMP, 1 - CLAMP), np.clip(cn, CLAMP, 1 - CLAMP)
    value = float(-np.mean(np.log(cp_c)) - np.mean(np.log(1.0 - cn_c)))
    gp = np.where(okp, -(1.0 - cp), 0.0) / cp.shape[0]
    gn = np.where(okn, cn, 0.0) / cn.shape[0]
    _, g1 = backward(net, tp, gp[:, None])
    _, g2 = backward(net, tn, gn[:, None])
    clamped = int((~okp).sum() + (~okn).sum())
    return Loss(value, {"discriminator": [a + b for a, b in zip(g1, g2)]}), clamped


def discriminator_reward(aux, achieved, goals):
    """``log c / (1 - c)`` with the same clamping as the loss."""
    c = _sigmoid(forward(aux.discriminator, np.concatenate([achieved, goals], axis=-1))[0][:, 0])
    c = np.clip(c, CLAMP, 1 - CLAMP)
    return np.log(c) - np.log1p(-c)


def gofar_losses(bundle, batch, rng=None, obs=None):
    """Discriminator, value and advantage-weighted policy losses.

    Positives for the discriminator are goals paired with achieved goals drawn
    uniformly from the goal region (exactly the goal when ``rng`` is None);
    negatives are the dataset's ``(achieved(s'), g)`` pairs.  The reward is the
    clamped discriminator log-ratio, ``f*`` is the chi-squared conjugate and the
    policy weight ``max(0, f*'(R + gamma V' - V))`` is held constant.
    """
    _nonempty(batch)
    aux, gamma = bundle.aux, bundle.gamma
    if aux is None:
        raise ValueError("bundle has no GoFar auxiliary networks")
    eta = bundle.manifest.get("eta", 0.05) / bundle.scaler.goal_std
    goals = batch.goals
    ach_next = bundle.achieved(batch.next_states)
    pos_ach = goals if rng is None else goals + rng.uniform(-eta, eta, size=goals.shape)
    disc, clamped = discriminator_loss(
        aux, np.concatenate([pos_ach, goals], axis=-1), np.concatenate([ach_next, goals], axis=-1))

    R = discriminator_reward(aux, ach_next, goals)
    s, g = (batch.states, batch.goals) if obs is None else obs
    v0, t0 = forward(aux.value, observation(batch.init_states, goals))
    vs, ts = forward(aux.value, observation(s, g))
    vn, tn = forward(aux.value, observation(batch.next_states, goals))
    y = R + gamma * vn[:, 0] - vs[:, 0]
    n = y.shape[0]
    lv = float((1.0 - gamma) * np.mean(v0) + np.mean(chi2_conjugate(y)))
    fp = chi2_conjugate_grad(y)
    _, g0 = backward(aux.value, t0, np.full((v0.shape[0], 1), (1.0 - gamma) / v0.shape[0]))
    _, gs_ = backward(aux.value, ts, (-fp / n)[:, None])
    _, gn_ = backward(aux.value, tn, (gamma * fp / n)[:, None])
    value = Loss(lv, {"value": [a + b + c for a, b, c in zip(g0, gs_, gn_)]})

    weights = np.maximum(fp, 0.0)
    pol = gcsl_loss(bundle, batch, obs=obs, weights=weights)
    return GoFarLosses(disc, value, pol, clamped)


# --- training ---------------------------------------------------------------


@dataclass
class Schedule:
    epochs: int = 30
    cycles: int = 20
    batches: int = 40
    batch_size: int = 512
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    tau: float = 0.05
    future_ratio: float = 0.8
    seed: int = 0

    @classmethod
    def full_scale(cls, **kw):
        """The long 100-epoch schedule; the defaults above are a shorter run."""
        return cls(**{"epochs": 100, **kw})


class Learner:
    """Mutable training state: the bundle plus one Adam state per network."""

    def __init__(self, bundle, schedule):
        self.bundle = bundle
        self.schedule = schedule
        self.opt = {
            "policy": AdamState.for_params(bundle.policy.params, schedule.lr_actor, bundle.policy.param_names),
            "critic": AdamState.for_params(bundle.critic.params, schedule.lr_critic, bundle.critic.param_names),
        }
        if bundle.aux is not None:
            for name in ("discriminator", "value"):
                net = getattr(bundle.aux, name)
                self.opt[name] = AdamState.for_params(net.params, schedule.lr_critic, net.param_names)
        self.counters = Counter(disc_clamped=0, attack_fallback=0)

    def net(self, name):
        return self.bundle.networks()[name]

    def apply(self, loss):
        if not np.isfinite(loss.value):
            raise NumericalError(f"non-finite loss {loss.value}")
        for name, grads in loss.grads.items():
            adam_step(self.net(name).params, grads, self.opt[name])


def vanilla_step(learner, batch, rng, obs_fn=None, mix="mixed"):
    """One minibatch update for the bundle's algorithm.

    ``obs_fn(learner, batch)`` may return adversarial ``(states, goals)``; each
    loss is then the mix of its clean and adversarial evaluations.
    """
    b = learner.bundle
    adv = obs_fn(learner, batch) if obs_fn is not None else None
    stats = {}

    def both(fn, **kw):
        clean = fn(b, batch, **kw)
        if adv is None:
            return clean
        return mix_losses(clean, fn(b, batch, obs=adv, **kw), mix)

    if b.algo == "ddpg":
        y = bellman_target(b, batch)
        lc = both(ddpg_critic_loss, target=y)
        learner.apply(lc)
        la = both(ddpg_actor_loss)
        learner.apply(la)
        stats.update(critic=lc.value, actor=la.value)
    elif b.algo == "gcsl":
        lp = both(gcsl_loss)
        learner.apply(lp)
        stats.update(actor=lp.value)
    else:
        # discriminator is trained on clean data only, before the other terms
        clean = gofar_losses(b, batch, rng)
        learner.counters["disc_clamped"] += clean.clamped
        learner.apply(clean.discriminator)
        clean = gofar_losses(b, batch, None)
        value, pol = clean.value, clean.policy
        if adv is not None:
            other = gofar_losses(b, batch, None, obs=adv)
            value, pol = mix_losses(value, other.value, mix), mix_losses(pol, other.policy, mix)
        learner.apply(value)
        learner.apply(pol)
        stats.update(discriminator=clean.discriminator.value, value=value.value, actor=pol.value)
    return stats


def train(bundle, dataset, schedule=None, step=None, on_epoch=None, checkpoint_dir=None, env=None):
    """Offline training loop: ``epochs x cycles x batches`` minibatch updates.

    Batches are scaled into network inputs by the bundle's scaler, which is
    fitted on the dataset states first when ``config.normalize`` is set and the
    bundle still carries the identity.  Targets are updated by polyak
    averaging once per cycle.  ``step`` replaces
    :func:`vanilla_step` (defences plug in here).  ``on_epoch(epoch, bundle)``
    may return a dict of evaluation metrics merged into the learning curve.
    Returns ``(bundle, curve)``; a non-finite loss raises
    :class:`NumericalError` carrying the last finite checkpoint bytes.
    """
    schedule = schedule or Schedule()
    step = step or vanilla_step
    ratio = 0.0 if bundle.algo == "gofar" else schedule.future_ratio
    sampler = HindsightSampler(dataset, ratio, env=env)
    bundle.manifest.setdefault("eta", dataset.eta)
    if bundle.config.normalize and bundle.scaler.is_identity:
        bundle.scaler = ObsScaler.fit(dataset.states, bundle.goal_slice)
    learner = Learner(bundle, schedule)
    rng = np.random.default_rng([int(schedule.seed), 1])
    curve = []
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    for epoch in range(schedule.epochs):
        totals = {}
        for _ in range(schedule.cycles):
            for _ in range(schedule.batches):
                batch = bundle.scaler.batch(sampler.sample(rng, schedule.batch_size))
                try:
                    stats = step(learner, batch, rng)
                except NumericalError as exc:
                    exc.checkpoint = bundle.to_bytes()
                    raise
                for k, v in stats.items():
                    totals[k] = totals.get(k, 0.0) + v
            bundle.polyak(schedule.tau)
        n = max(schedule.cycles * schedule.batches, 1)
        row = {"epoch": epoch, **{k: v / n for k, v in totals.items()}}
        if checkpoint_dir is not None:
            bundle.save(Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt")
        if on_epoch is not None:
            row.update(on_epoch(epoch, bundle) or {})
        log.debug("epoch %d %s", epoch, row)
        curve.append(row)
    bundle.manifest["counters"] = dict(learner.counters)
    return bundle, curve
