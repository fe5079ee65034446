"""Observation-space adversaries on state-goal tuples.

Attacks act on network inputs (environment tuples after the bundle's
scaler), so radii are measured in that space.  All attacks are batched: ``states`` is ``(B, Ds)`` and ``goals`` ``(B, Dg)``.
Losses are summed over rows, so each row gets its own gradient and the batch
result equals attacking every tuple separately.

Iterative attacks take raw (unsigned) gradient steps, descending their loss:

* SCR  loss ``L_sim = -f(<V(s), V(g)>) . f(<s, g>^-)`` where ``f`` is the
  policy activation at ``spec.layer`` and ``<s, g>^-`` a sign-flipped tuple.
  Only the policy network is read.
* SA   loss ``Q(<V(s), V(g)>, pi(<V(s), V(g)>))``; needs a critic.

FGSM is the one-step case with step ``eps`` (per component), so it matches a
1-step PGD with ``step_size == eps``.  The ascent written as ``+eps grad L``
for FGSM is the same move once ``L`` is taken as the negated descent loss.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .agents import act_observed, observation, policy_forward
from .diffmlp import backward, forward, grad_input
from .errors import AttackError

log = logging.getLogger(__name__)

KINDS = ("uniform", "sa-fgsm", "sa-pgd", "scr-fgsm", "scr-pgd")
NEGATIVE_MODES = ("state", "goal", "state+goal")
TARGETS = ("state", "goal", "both")
PROJECTIONS = ("final", "step")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "scr-pgd"
    eps_state: float = 0.1
    eps_goal: float = 0.1
    steps: int = 10
    step_size: float = 0.01
    negative_mode: str = "state+goal"
    target: str = "state"
    layer: int = 1
    projection: str = "final"
    sign_gradient: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ValueError(f"negative_mode must be one of {NEGATIVE_MODES}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}")
        if self.eps_state < 0 or self.eps_goal < 0:
            raise ValueError("attack radii must be non-negative")
        if self.step_size <= 0 or self.steps < 1 or self.layer < 1:
            raise ValueError("need step_size > 0, steps >= 1, layer >= 1")

    @property
    def hits_state(self):
        return self.target in ("state", "both")

    @property
    def hits_goal(self):
        return self.target in ("goal", "both")

    @property
    def label(self):
        if self.kind == "uniform":
            return f"uniform/{self.target}"
        return f"{self.kind}/{self.negative_mode}/{self.target}/L{self.layer}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return AttackSpec(**{**asdict(self), **kw})


def negative_tuple(states, goals, mode):
    """Sign-flip the state, the goal, or both."""
    if mode not in NEGATIVE_MODES:
        raise ValueError(f"negative mode must be one of {NEGATIVE_MODES}")
    states, goals = np.asarray(states, dtype=np.float64), np.asarray(goals, dtype=np.float64)
    ns = -states if mode in ("state", "state+goal") else states.copy()
    ng = -goals if mode in ("goal", "state+goal") else goals.copy()
    return ns, ng


def project_linf(candidate, anchor, eps):
    """Clamp into ``[anchor - eps, anchor + eps]`` coordinate-wise.

    The result satisfies ``abs(result - anchor) <= eps`` as evaluated in
    floating point, which a bare clip can miss by one ulp.
    """
    candidate = np.asarray(candidate, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    out = np.clip(candidate, anchor - eps, anchor + eps)
    over = np.abs(out - anchor) > eps
    while np.any(over):
        out = np.where(over, np.nextafter(out, anchor), out)
        over = np.abs(out - anchor) > eps
    return out


def logistic_loss(v):
    """``log(1 + exp(-v))`` evaluated stably."""
    return np.logaddexp(0.0, -np.asarray(v, dtype=np.float64))


def features(policy, states, goals, layer=1):
    """Policy activation at ``layer`` and the tape that produced it."""
    return forward(policy, observation(states, goals), upto=layer)


def scr_similarity_loss(policy, adv_states, adv_goals, neg_states, neg_goals, layer=1,
                        neg_features=None):
    """Per-row ``-f(adv) . f(neg)`` and its gradients w.r.t. the adversarial
    state and goal slices."""
    if neg_features is None:
        neg_features = features(policy, neg_states, neg_goals, layer)[0]
    f, tape = features(policy, adv_states, adv_goals, layer)
    loss = -np.sum(f * neg_features, axis=-1)
    gx = grad_input(policy, tape, -neg_features, layer=layer)
    ds = np.shape(adv_states)[-1]
    return loss, gx[:, :ds], gx[:, ds:]


def sa_loss(bundle, states, goals):
    """Per-row ``Q(<s, g>, pi(<s, g>))`` and input gradients (action re-derived
    from the perturbed tuple).  GoFar bundles use their value network."""
    x = observation(states, goals)
    if bundle.algo == "gcsl":
        raise AttackError("SA attacks need a critic; GCSL agents have none")
    if bundle.algo == "gofar":
        v, tape = forward(bundle.aux.value, x)
        gx = grad_input(bundle.aux.value, tape, np.ones_like(v))
    else:
        a, ptape = policy_forward(bundle.policy, x)
        q, ctape = forward(bundle.critic, np.concatenate([x, a], axis=-1))
        gin = grad_input(bundle.critic, ctape, np.ones_like(q))
        d = bundle.dim_input
        gx = gin[:, :d] + grad_input(bundle.policy, ptape, gin[:, d:] * (1.0 - a * a))
        v = q
    ds = bundle.dim_state
    return v[:, 0], gx[:, :ds], gx[:, ds:]


def _descend(grad_fn, states, goals, spec, steps, step_state, step_goal, stats):
    s0 = np.atleast_2d(np.asarray(states, dtype=np.float64))
    g0 = np.atleast_2d(np.asarray(goals, dtype=np.float64))
    vs, vg = s0.copy(), g0.copy()
    failed = np.zeros(s0.shape[0], dtype=bool)
    for _ in range(steps):
        gs, gg = grad_fn(vs, vg)
        failed |= ~(np.all(np.isfinite(gs), axis=-1) & np.all(np.isfinite(gg), axis=-1))
        if spec.sign_gradient:
            gs, gg = np.sign(gs), np.sign(gg)
        gs, gg = np.where(failed[:, None], 0.0, gs), np.where(failed[:, None], 0.0, gg)
        if spec.hits_state:
            vs = vs - step_state * gs
        if spec.hits_goal:
            vg = vg - step_goal * gg
        if spec.projection == "step":
            vs, vg = _project(vs, vg, s0, g0, spec)
    vs, vg = _project(vs, vg, s0, g0, spec)
    if failed.any():
        if stats is not None:
            stats["nonfinite_gradient"] += int(failed.sum())
        log.warning("attack %s: non-finite gradient on %d rows, returning clean tuples",
                    spec.label, int(failed.sum()))
        vs[failed], vg[failed] = s0[failed], g0[failed]
    return vs, vg


def _project(vs, vg, s0, g0, spec):
    if spec.hits_state:
        vs = project_linf(vs, s0, spec.eps_state)
    if spec.hits_goal:
        vg = project_linf(vg, g0, spec.eps_goal)
    return vs, vg


def _scr_grad_fn(policy, states, goals, spec):
    ns, ng = negative_tuple(states, goals, spec.negative_mode)
    nf = features(policy, ns, ng, spec.layer)[0]

    def grad_fn(vs, vg):
        _, gs, gg = scr_similarity_loss(policy, vs, vg, ns, ng, spec.layer, neg_features=nf)
        return gs, gg
    return grad_fn


def scr_pgd(policy, states, goals, spec, stats=None):
    """Semi-contrastive PGD from the clean tuple; reads only ``policy``."""
    fn = _scr_grad_fn(policy, states, goals, spec)
    return _descend(fn, states, goals, spec, spec.steps, spec.step_size, spec.step_size, stats)


def scr_fgsm(policy, states, goals, spec, stats=None):
    fn = _scr_grad_fn(policy, states, goals, spec)
    return _descend(fn, states, goals, spec.replace(projection="final"), 1,
                    spec.eps_state, spec.eps_goal, stats)


def sa_attack(bundle, states, goals, spec, stats=None):
    """SA-FGSM or SA-PGD (by ``spec.kind``): drive down the critic's value."""
    def grad_fn(vs, vg):
        _, gs, gg = sa_loss(bundle, vs, vg)
        return gs, gg
    if spec.kind == "sa-fgsm":
        return _descend(grad_fn, states, goals, spec.replace(projection="final"), 1,
                        spec.eps_state, spec.eps_goal, stats)
    return _descend(grad_fn, states, goals, spec, spec.steps, spec.step_size, spec.step_size, stats)


def uniform_attack(states, goals, spec, rng):
    """I.i.d. ``U[-eps, eps]`` noise on the targeted components."""
    s0 = np.atleast_2d(np.asarray(states, dtype=np.float64))
    g0 = np.atleast_2d(np.asarray(goals, dtype=np.float64))
    vs, vg = s0.copy(), g0.copy()
    if spec.hits_state:
        vs = project_linf(s0 + rng.uniform(-spec.eps_state, spec.eps_state, size=s0.shape), s0, spec.eps_state)
    if spec.hits_goal:
        vg = project_linf(g0 + rng.uniform(-spec.eps_goal, spec.eps_goal, size=g0.shape), g0, spec.eps_goal)
    return vs, vg


def run_attack(bundle, states, goals, spec, rng=None, stats=None):
    """Dispatch on ``spec.kind``.  SCR attacks are handed the policy only."""
    if spec.kind == "uniform":
        if rng is None:
            raise ValueError("uniform attack needs an explicit rng")
        return uniform_attack(states, goals, spec, rng)
    if spec.kind == "scr-pgd":
        return scr_pgd(bundle.policy, states, goals, spec, stats)
    if spec.kind == "scr-fgsm":
        return scr_fgsm(bundle.policy, states, goals, spec, stats)
    return sa_attack(bundle, states, goals, spec, stats)


def make_adversary(bundle, spec=None, rng=None, stats=None, first_steps=None):
    """Adapter for :func:`gcenv.rollout` paired with :func:`make_observed_policy`.

    Environment tuples are scaled into network inputs and then perturbed (at
    every step, or only the first ``first_steps`` of each episode).  Attack
    radii therefore live in the network-input space.  ``spec=None`` scales
    without attacking.
    """
    stats = Counter() if stats is None else stats

    def adversary(states, goals, t):
        obs = bundle.scaler.observe(states, goals)
        if spec is None or (first_steps is not None and t >= first_steps):
            return obs
        return run_attack(bundle, *obs, spec, rng, stats)
    return adversary


def make_observed_policy(bundle):
    return lambda s, g: act_observed(bundle, s, g)


def default_grid(eps=0.1, steps=10, step_size=0.01, layer=1, negative_modes=NEGATIVE_MODES,
                 targets=TARGETS):
    """The kinds x negative modes x targets grid (uniform ignores the mode)."""
    grid = []
    for target in targets:
        grid.append(AttackSpec("uniform", eps, eps, steps, step_size, "state+goal", target, layer))
        for kind in KINDS[1:]:
            modes = negative_modes if kind.startswith("scr") else ("state+goal",)
            for mode in modes:
                grid.append(AttackSpec(kind, eps, eps, steps, step_size, mode, target, layer))
    return grid
