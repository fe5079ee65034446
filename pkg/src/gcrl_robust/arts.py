"""Defences composed onto a base agent.

* SCAA: each minibatch is attacked with a semi-contrastive attack computed on
  the current policy, and every actor/critic (or value/policy) loss becomes the
  average of its clean and adversarial evaluations.
* SimSR: after the base update, the encoder takes an extra Adam step on the
  mean-square representation loss, optionally plus the sensitivity-aware
  regulariser (SAR).

Pipelines are named ``vanilla``, ``scaa``, ``simsr``, ``simsr+sar`` and the
SCAA-on-top variants ``scaa+simsr`` and ``scaa+simsr+sar``.
"""
from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field

from . import agents, attacks, simsr
from .attacks import AttackSpec
from .diffmlp import AdamState, adam_step
from .errors import AttackError, ConfigError, NumericalError
from .simsr import SarConfig

PIPELINES = ("vanilla", "scaa", "simsr", "simsr+sar", "scaa+simsr", "scaa+simsr+sar")


def default_augmentation():
    return AttackSpec("scr-pgd", 0.1, 0.1, 10, 0.01, negative_mode="state", target="state")


@dataclass
class DefenseConfig:
    pipeline: str = "vanilla"
    attack: AttackSpec = field(default_factory=default_augmentation)
    mix: str = "mixed"
    sar: SarConfig = field(default_factory=SarConfig)
    sar_weight: float = 1.0
    simsr_lr: float = 1e-3

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.mix not in ("mixed", "exclusive"):
            raise ConfigError("mix must be 'mixed' or 'exclusive'")
        if isinstance(self.attack, dict):
            self.attack = AttackSpec.from_dict(self.attack)
        if isinstance(self.sar, dict):
            self.sar = SarConfig(**self.sar)

    @property
    def scaa(self):
        return self.pipeline.startswith("scaa")

    @property
    def simsr(self):
        return "simsr" in self.pipeline

    @property
    def use_sar(self):
        return self.pipeline.endswith("sar")

    def to_dict(self):
        return {"pipeline": self.pipeline, "attack": self.attack.to_dict(), "mix": self.mix,
                "sar": dataclasses.asdict(self.sar), "sar_weight": self.sar_weight,
                "simsr_lr": self.simsr_lr}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown defense keys: {sorted(unknown)}")
        return cls(**d)


def check_compatible(base_tag, defense):
    if defense.scaa and base_tag == "gcsl" and not defense.attack.kind.startswith("scr"):
        raise ConfigError("GCSL has no critic: SCAA must use an SCR attack")
    if defense.scaa and defense.attack.kind == "uniform":
        raise ConfigError("SCAA augmentation needs a gradient attack")


def scaa_observations(defense):
    """``obs_fn`` for :func:`agents.vanilla_step` producing SCR-augmented tuples."""
    spec = defense.attack

    def obs_fn(learner, batch):
        stats = Counter()
        try:
            out = attacks.run_attack(learner.bundle, batch.states, batch.goals, spec, stats=stats)
        except (AttackError, NumericalError):
            out = None
        if out is None or stats["nonfinite_gradient"]:
            learner.counters["attack_fallback"] += 1
            return None
        return out
    return obs_fn


def sar_simsr_encoder_step(learner, batch, defense, rng):
    """One encoder-only step on ``simsr_loss + sar_weight * SAR``."""
    b = learner.bundle
    if "encoder" not in learner.opt:
        learner.opt["encoder"] = AdamState.for_params(b.policy.params[:2], defense.simsr_lr, ["W1", "b1"])
    perm = simsr.pair_batch(batch, rng)
    value, grads = simsr.simsr_loss(b.policy, b.target_policy, batch, perm, b.gamma, learner.counters)
    if defense.use_sar and defense.sar_weight != 0.0:
        sv, sg = simsr.sar_for_batch(b.policy, batch, perm, defense.sar, rng, learner.counters)
        value += defense.sar_weight * sv
        grads = [g + defense.sar_weight * h for g, h in zip(grads, sg)]
    adam_step(b.policy.params[:2], grads, learner.opt["encoder"])
    return value


def make_step(defense):
    obs_fn = scaa_observations(defense) if defense.scaa else None

    def step(learner, batch, rng):
        stats = agents.vanilla_step(learner, batch, rng, obs_fn=obs_fn, mix=defense.mix)
        if defense.simsr:
            stats["simsr"] = sar_simsr_encoder_step(learner, batch, defense, rng)
        return stats
    return step


@dataclass
class Pipeline:
    base: str
    defense: DefenseConfig

    @property
    def name(self):
        return f"{self.base}/{self.defense.pipeline}"

    def manifest(self):
        return {"base": self.base, "defense": self.defense.to_dict()}

    @classmethod
    def from_manifest(cls, m):
        return compose_defense(m["base"], DefenseConfig.from_dict(m["defense"]))

    def train(self, bundle, dataset, schedule=None, **kw):
        if bundle.algo != self.base:
            raise ConfigError(f"pipeline for {self.base} given a {bundle.algo} bundle")
        bundle.manifest["pipeline"] = self.manifest()
        step = None if self.defense.pipeline == "vanilla" else make_step(self.defense)
        return agents.train(bundle, dataset, schedule, step=step, **kw)


def compose_defense(base_tag, defense=None):
    defense = defense or DefenseConfig()
    if base_tag not in agents.ALGORITHMS:
        raise ConfigError(f"unknown base algorithm {base_tag!r}")
    check_compatible(base_tag, defense)
    return Pipeline(base_tag, defense)


def scaa_epoch(bundle, dataset, defense, schedule=None, **kw):
    """A single epoch of SCAA training (fresh optimiser state)."""
    schedule = dataclasses.replace(schedule or agents.Schedule(), epochs=1)
    if not defense.scaa:
        defense = dataclasses.replace(defense, pipeline="scaa")
    return agents.train(bundle, dataset, schedule, step=make_step(defense), **kw)[0]
