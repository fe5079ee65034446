"""Goal-conditioned point-mass environments, rollouts and offline datasets.

Three analytic stand-ins for the Fetch manipulation tasks:

* ``PointReach``  position/velocity point mass; the goal is a position.
* ``PointPush``   kinematic gripper that drags an object once in contact.
* ``PointSlide``  gripper confined to a workspace strikes an object that then
  slides (friction 0.95/step) towards goals lying outside the workspace.

Environments are stateless: every method takes explicit state arrays and is
vectorised over leading batch dimensions.  The reward is the sparse indicator
``1[||achieved - goal||_inf <= eta]`` and is earned on every step spent inside
the goal region.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericalError

HORIZON = 50
GAMMA = 0.98
ETA = 0.05


def reward(achieved, goal, eta=ETA):
    """Indicator reward, inclusive at the boundary; vectorised over rows."""
    achieved = np.asarray(achieved, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if achieved.shape[-1:] != goal.shape[-1:]:
        raise DimensionError(f"achieved goal dim {achieved.shape[-1:]} != goal dim {goal.shape[-1:]}")
    if eta <= 0:
        raise ValueError("eta must be positive")
    hit = np.max(np.abs(achieved - goal), axis=-1) <= eta
    return hit.astype(np.float64)


def max_return(gamma=GAMMA, horizon=HORIZON):
    """Return of a policy that is inside the goal region on every step."""
    return (1.0 - gamma ** horizon) / (1.0 - gamma)


def discounted_return(rewards, gamma=GAMMA):
    rewards = np.asarray(rewards, dtype=np.float64)
    disc = gamma ** np.arange(rewards.shape[-1])
    return rewards @ disc


class GoalEnv:
    """Base class; subclasses define dims, dynamics, samplers and the expert."""

    name = "base"
    dim_state = 0
    dim_goal = 0
    dim_action = 2
    goal_slice = slice(0, 0)

    def __init__(self, eta=ETA, horizon=HORIZON):
        if eta <= 0:
            raise ValueError("eta must be positive")
        self.eta = float(eta)
        self.horizon = int(horizon)

    @property
    def dim_input(self):
        return self.dim_state + self.dim_goal

    def achieved(self, states):
        return np.asarray(states)[..., self.goal_slice]

    def _check(self, states, actions=None):
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1] != self.dim_state:
            raise DimensionError(f"{self.name}: state dim {states.shape[-1]} != {self.dim_state}")
        if actions is None:
            return states
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape[-1] != self.dim_action:
            raise DimensionError(f"{self.name}: action dim {actions.shape[-1]} != {self.dim_action}")
        return states, np.clip(actions, -1.0, 1.0)

    def dynamics(self, states, actions):
        raise NotImplementedError

    def step(self, states, actions, goals):
        """Advance one step; returns ``(next_states, rewards)``.

        Actions are clipped to ``[-1, 1]`` before use.
        """
        states, actions = self._check(states, actions)
        nxt = self.dynamics(states, actions)
        return nxt, reward(self.achieved(nxt), goals, self.eta)

    def sample_start(self, rng, n):
        """Draw ``n`` initial states and goals."""
        raise NotImplementedError

    def expert_action(self, states, goals):
        raise NotImplementedError


class PointReach(GoalEnv):
    """2-D point mass: state = position (2) + velocity (2), action = acceleration.

    Initial position uniform in ``[-0.1, 0.1]^2`` at rest; goal offset uniform
    in ``[-0.15, 0.15]^2`` from the initial position.
    """

    name = "PointReach"
    dim_state = 4
    dim_goal = 2
    dim_action = 2
    goal_slice = slice(0, 2)
    dt = 0.1
    vmax = 0.5

    def dynamics(self, states, actions):
        pos, vel = states[..., :2], states[..., 2:]
        vel = np.clip(vel + self.dt * actions, -self.vmax, self.vmax)
        pos = pos + self.dt * vel
        return np.concatenate([pos, vel], axis=-1)

    def sample_start(self, rng, n):
        pos = rng.uniform(-0.1, 0.1, size=(n, 2))
        goals = pos + rng.uniform(-0.15, 0.15, size=(n, 2))
        return np.concatenate([pos, np.zeros((n, 2))], axis=-1), goals

    def expert_action(self, states, goals, kp=5.0, kd=2.0):
        pos, vel = states[..., :2], states[..., 2:]
        return np.clip(kp * (goals - pos) - kd * vel, -1.0, 1.0)


class PointPush(GoalEnv):
    """Gripper (2) + object (2).  The gripper moves ``0.05 * action`` per step;
    while within ``contact`` of the gripper the object is carried along.
    """

    name = "PointPush"
    dim_state = 4
    dim_goal = 2
    dim_action = 2
    goal_slice = slice(2, 4)
    move = 0.05
    contact = 0.1

    def dynamics(self, states, actions):
        grip, obj = states[..., :2], states[..., 2:4]
        new_grip = grip + self.move * actions
        touching = np.linalg.norm(grip - obj, axis=-1, keepdims=True) <= self.contact
        obj = np.where(touching, obj + (new_grip - grip), obj)
        return np.concatenate([new_grip, obj], axis=-1)

    def sample_start(self, rng, n):
        grip = rng.uniform(-0.1, 0.1, size=(n, 2))
        obj = rng.uniform(-0.3, 0.3, size=(n, 2))
        goals = rng.uniform(-0.3, 0.3, size=(n, 2))
        return np.concatenate([grip, obj], axis=-1), goals

    def expert_action(self, states, goals, kp=5.0):
        grip, obj = states[..., :2], states[..., 2:4]
        touching = np.linalg.norm(grip - obj, axis=-1, keepdims=True) <= self.contact
        # approach along the goal->object line so the carry starts from behind
        behind = obj - 0.05 * _unit(goals - obj)
        target = np.where(touching, grip + (goals - obj), behind)
        return np.clip(kp * (target - grip) / (self.move * 4.0), -1.0, 1.0)


class PointSlide(GoalEnv):
    """Gripper (2) + object position (2) + object velocity (2).

    The gripper is clipped to the workspace ``[-0.3, 0.3]^2``.  Contact while the
    object sits inside the workspace sets the object velocity to the gripper
    displacement; outside the workspace (where goals live) the object cannot be
    touched and coasts with velocity decaying by ``friction`` each step.
    """

    name = "PointSlide"
    dim_state = 6
    dim_goal = 2
    dim_action = 2
    goal_slice = slice(2, 4)
    move = 0.05
    contact = 0.1
    friction = 0.95
    workspace = 0.3

    def dynamics(self, states, actions):
        grip, obj, ovel = states[..., :2], states[..., 2:4], states[..., 4:6]
        new_grip = np.clip(grip + self.move * actions, -self.workspace, self.workspace)
        reachable = np.all(np.abs(obj) <= self.workspace, axis=-1, keepdims=True)
        touching = (np.linalg.norm(new_grip - obj, axis=-1, keepdims=True) <= self.contact) & reachable
        ovel = np.where(touching, new_grip - grip, ovel)
        obj = obj + ovel
        ovel = self.friction * ovel
        return np.concatenate([new_grip, obj, ovel], axis=-1)

    def sample_start(self, rng, n):
        grip = np.column_stack([rng.uniform(-0.25, -0.15, size=n), rng.uniform(-0.1, 0.1, size=n)])
        obj = np.column_stack([rng.uniform(-0.05, 0.05, size=n), rng.uniform(-0.1, 0.1, size=n)])
        goals = np.column_stack([rng.uniform(0.5, 0.9, size=n), rng.uniform(-0.2, 0.2, size=n)])
        return np.concatenate([grip, obj, np.zeros((n, 2))], axis=-1), goals

    def expert_action(self, states, goals):
        grip, obj, ovel = states[..., :2], states[..., 2:4], states[..., 4:6]
        u = _unit(goals - obj)
        behind = obj - 0.12 * u
        dist = np.linalg.norm(goals - obj, axis=-1, keepdims=True)
        lined_up = np.linalg.norm(grip - behind, axis=-1, keepdims=True) <= 0.02
        moving = np.linalg.norm(ovel, axis=-1, keepdims=True) > 1e-6
        # coasting distance of a strike with speed v is v / (1 - friction)
        strike = u * np.minimum(dist * (1.0 - self.friction) / self.move, 1.0)
        approach = np.clip(5.0 * (behind - grip) / (self.move * 4.0), -1.0, 1.0)
        act = np.where(lined_up, strike, approach)
        return np.where(moving, 0.0, act)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1e-12)


ENVIRONMENTS = {cls.name: cls for cls in (PointReach, PointPush, PointSlide)}


def make_env(name, eta=ETA, horizon=HORIZON):
    try:
        return ENVIRONMENTS[name](eta=eta, horizon=horizon)
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


# --- rollouts ----------------------------------------------------------------


@dataclass
class Episodes:
    """A batch of equal-length episodes (``E`` episodes of ``T`` steps)."""

    states: np.ndarray       # (E, T+1, Ds)
    actions: np.ndarray      # (E, T, Da)
    goals: np.ndarray        # (E, Dg)
    rewards: np.ndarray      # (E, T)
    gamma: float = GAMMA

    @property
    def returns(self):
        return discounted_return(self.rewards, self.gamma)


def rollout(env, policy, goals, init_states, horizon=None, gamma=GAMMA, adversary=None):
    """Run ``policy`` from ``init_states`` towards ``goals`` (batched over rows).

    ``policy(states, goals) -> actions``.  ``adversary(states, goals, t)``
    returns the perturbed ``(states, goals)`` the policy observes at step ``t``;
    the dynamics always advance the true state.
    """
    horizon = env.horizon if horizon is None else int(horizon)
    goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))
    s = env._check(np.atleast_2d(init_states))
    n = s.shape[0]
    states = np.empty((n, horizon + 1, env.dim_state))
    actions = np.empty((n, horizon, env.dim_action))
    rewards = np.empty((n, horizon))
    states[:, 0] = s
    for t in range(horizon):
        obs_s, obs_g = (s, goals) if adversary is None else adversary(s, goals, t)
        a = np.asarray(policy(obs_s, obs_g), dtype=np.float64)
        if not np.all(np.isfinite(a)):
            bad = np.flatnonzero(~np.all(np.isfinite(a), axis=-1))
            raise NumericalError(f"policy emitted a non-finite action at t={t} in episodes {bad.tolist()}")
        a = np.clip(a, -1.0, 1.0)
        s, r = env.step(s, a, goals)
        actions[:, t] = a
        states[:, t + 1] = s
        rewards[:, t] = r
    return Episodes(states, actions, goals, rewards, gamma)


# --- offline datasets --------------------------------------------------------

DATASET_VERSION = 1


@dataclass
class OfflineDataset:
    env_id: str
    states: np.ndarray     # (E, T+1, Ds)
    actions: np.ndarray    # (E, T, Da)
    goals: np.ndarray      # (E, Dg)
    rewards: np.ndarray    # (E, T)
    expert: np.ndarray     # (E,) bool
    eta: float = ETA
    seed: int = 0
    mix: dict = field(default_factory=lambda: {"random_fraction": 1.0, "expert_fraction": 0.0})

    @property
    def episodes(self):
        return self.states.shape[0]

    @property
    def horizon(self):
        return self.actions.shape[1]

    @property
    def size(self):
        return self.episodes * self.horizon

    def header(self):
        return {
            "format_version": DATASET_VERSION,
            "env_id": self.env_id,
            "dim_state": int(self.states.shape[-1]),
            "dim_goal": int(self.goals.shape[-1]),
            "dim_action": int(self.actions.shape[-1]),
            "eta": self.eta,
            "horizon": self.horizon,
            "seed": int(self.seed),
            "mix": dict(self.mix),
            "episodes": self.episodes,
            "size": self.size,
        }

    def save(self, path):
        """Canonical binary form: an uncompressed ``.npz`` with a JSON header."""
        header = json.dumps(self.header(), sort_keys=True)
        with open(path, "wb") as fh:
            np.savez(
                fh,
                header=np.array(header),
                states=self.states,
                actions=self.actions,
                goals=self.goals,
                rewards=self.rewards,
                expert=self.expert,
            )

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("format_version") != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {header.get('format_version')}")
            ds = cls(
                header["env_id"], z["states"], z["actions"], z["goals"], z["rewards"],
                z["expert"], eta=header["eta"], seed=header["seed"], mix=header["mix"],
            )
        if ds.size != header["size"]:
            raise ValueError("dataset header size disagrees with stored transitions")
        return ds

    def to_csv(self, path_or_buf):
        ds, dg, da = self.states.shape[-1], self.goals.shape[-1], self.actions.shape[-1]
        cols = (["episode", "t"] + [f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)]
                + [f"s_next{i}" for i in range(ds)] + [f"g{i}" for i in range(dg)] + ["r"])
        own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            w = csv.writer(fh)
            w.writerow(cols)
            for e in range(self.episodes):
                for t in range(self.horizon):
                    row = [e, t, *self.states[e, t], *self.actions[e, t], *self.states[e, t + 1],
                           *self.goals[e], self.rewards[e, t]]
                    w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        finally:
            if own:
                fh.close()

    def to_csv_string(self):
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


def expert_schedule(episodes, expert_fraction):
    """Deterministic allocation: episode ``i`` is expert iff
    ``floor((i+1) f) > floor(i f)``; exactly ``floor(episodes * f)`` experts."""
    i = np.arange(episodes)
    # tiny slack keeps e.g. 0.1 * 10 from landing at 0.9999999
    f = expert_fraction
    return np.floor((i + 1) * f + 1e-9) > np.floor(i * f + 1e-9)


def collect_dataset(env, mix, episodes, seed):
    """Collect ``episodes`` episodes with a deterministic random/expert split.

    Random episodes draw every action uniformly from ``[-1, 1]^Da``.  Each
    episode gets its own generator seeded by ``(seed, episode)``.
    """
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    rnd, exp = float(mix.get("random_fraction", 0.0)), float(mix.get("expert_fraction", 0.0))
    if abs(rnd + exp - 1.0) > 1e-9 or rnd < 0 or exp < 0:
        raise ValueError(f"mix fractions must be non-negative and sum to 1, got {mix}")
    is_expert = expert_schedule(episodes, exp)
    T = env.horizon
    states = np.empty((episodes, T + 1, env.dim_state))
    actions = np.empty((episodes, T, env.dim_action))
    goals = np.empty((episodes, env.dim_goal))
    rewards = np.empty((episodes, T))
    for e in range(episodes):
        rng = np.random.default_rng([int(seed), e])
        s0, g = env.sample_start(rng, 1)
        if is_expert[e]:
            policy = env.expert_action
        else:
            def policy(s, g, rng=rng):
                return rng.uniform(-1.0, 1.0, size=(s.shape[0], env.dim_action))
        ep = rollout(env, policy, g, s0)
        states[e], actions[e], goals[e], rewards[e] = ep.states[0], ep.actions[0], g[0], ep.rewards[0]
    return OfflineDataset(env.name, states, actions, goals, rewards, is_expert, eta=env.eta,
                          seed=int(seed), mix={"random_fraction": rnd, "expert_fraction": exp})


# --- minibatch sampling with hindsight relabelling ---------------------------


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    goals: np.ndarray
    rewards: np.ndarray
    init_states: np.ndarray   # first state of each sampled transition's episode

    def __len__(self):
        return self.states.shape[0]

    def take(self, idx):
        return Batch(*(getattr(self, f)[idx] for f in
                       ("states", "actions", "next_states", "goals", "rewards", "init_states")))


class HindsightSampler:
    """Uniform transition sampler with ``future`` goal relabelling.

    With probability ``future_ratio`` a transition at step ``t`` gets the goal
    ``achieved(s_f)`` for ``f`` uniform in ``t+1..T`` of the same episode, and its
    reward is recomputed.
    """

    def __init__(self, dataset, future_ratio=0.8, env=None):
        if not 0.0 <= future_ratio <= 1.0:
            raise ValueError("future_ratio must lie in [0, 1]")
        self.dataset = dataset
        self.future_ratio = float(future_ratio)
        self.env = env if env is not None else make_env(dataset.env_id, eta=dataset.eta,
                                                        horizon=dataset.horizon)

    def sample(self, rng, batch_size):
        ds = self.dataset
        E, T = ds.episodes, ds.horizon
        ep = rng.integers(0, E, size=batch_size)
        t = rng.integers(0, T, size=batch_size)
        goals = ds.goals[ep].copy()
        rewards = ds.rewards[ep, t].copy()
        nxt = ds.states[ep, t + 1]
        if self.future_ratio > 0.0:
            relabel = rng.uniform(size=batch_size) < self.future_ratio
            future = t + 1 + np.floor(rng.uniform(size=batch_size) * (T - t)).astype(int)
            future = np.minimum(future, T)
            goals[relabel] = self.env.achieved(ds.states[ep[relabel], future[relabel]])
            rewards = reward(self.env.achieved(nxt), goals, ds.eta)
        return Batch(ds.states[ep, t], ds.actions[ep, t], nxt, goals, rewards, ds.states[ep, 0])
