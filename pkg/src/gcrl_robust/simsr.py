"""Cosine-distance representation metric on state-goal tuples.

The encoder is the first layer of a bundle's policy network; its ReLU output
``psi(<s, g>)`` is compared with ``M(x, y) = 1 - cos(psi(x), psi(y))``.  This
module provides the measurement, the sample-based operator target, the
mean-square encoder loss, the sensitivity-aware regulariser and a tabulated
probe of the operator's contraction factor.

Gradient-bearing functions return ``(value, grads)`` with ``grads`` matching
the encoder parameters ``[W1, b1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import observation
from .diffmlp import backward, forward
from .errors import DegenerateRepresentation

ENCODER_LAYER = 1


def encode(policy, x):
    """Encoder features and tape for rows of ``x``."""
    return forward(policy, np.atleast_2d(x), upto=ENCODER_LAYER)


def normalize(z):
    z = np.atleast_2d(z)
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise DegenerateRepresentation(f"{int(np.sum(n == 0.0))} zero-norm encoder outputs")
    return z / n


def representation(policy, states, goals):
    """Unit-norm encoder features of ``<s, g>``."""
    return normalize(encode(policy, observation(states, goals))[0])


def _cosine(u, v):
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise DegenerateRepresentation("zero-norm encoder output in measurement")
    dot = np.sum(u * v, axis=-1)
    return dot / (nu * nv), dot, nu, nv


def measurement_features(u, v):
    """Row-wise ``1 - cos(u, v)`` clipped to ``[0, 2]`` against rounding."""
    c = _cosine(np.atleast_2d(u), np.atleast_2d(v))[0]
    return np.clip(1.0 - c, 0.0, 2.0)


def measurement(policy, xa, xb):
    """``M`` between rows of two concatenated tuple arrays."""
    return measurement_features(encode(policy, xa)[0], encode(policy, xb)[0])


def _measurement_grads(u, v):
    """``dM/du`` and ``dM/dv`` for ``M = 1 - u.v / (|u||v|)``."""
    c, _, nu, nv = _cosine(u, v)
    du = -(v / (nu * nv)[:, None] - c[:, None] * u / (nu * nu)[:, None])
    dv = -(u / (nu * nv)[:, None] - c[:, None] * v / (nv * nv)[:, None])
    return 1.0 - c, du, dv


def _live_rows(*zs):
    """Rows where every encoder output has non-zero norm."""
    return np.logical_and.reduce([np.linalg.norm(z, axis=-1) > 0.0 for z in zs])


def _masked_measurement_grads(u, v, live):
    """As :func:`_measurement_grads` but dead rows get ``M = 0`` and no gradient."""
    if live.all():
        return _measurement_grads(u, v)
    m = np.zeros(u.shape[0])
    du, dv = np.zeros_like(u), np.zeros_like(v)
    if live.any():
        m[live], du[live], dv[live] = _measurement_grads(u[live], v[live])
    return m, du, dv


class _PairGrad:
    """Accumulates encoder parameter gradients over several forward passes."""

    def __init__(self, policy):
        self.policy = policy
        self.grads = None

    def add(self, tape, cot):
        g = backward(self.policy, tape, cot, layer=ENCODER_LAYER)[1][:2]
        self.grads = g if self.grads is None else [a + b for a, b in zip(self.grads, g)]


def simsr_target(target_policy, rewards_i, rewards_j, next_i, next_j, gamma):
    """``|r_i - r_j| + gamma * M(next_i, next_j)`` under a frozen encoder."""
    return np.abs(np.asarray(rewards_i) - np.asarray(rewards_j)) + gamma * measurement(target_policy, next_i, next_j)


def pair_batch(batch, rng):
    """Pair each row with a uniformly permuted copy of the batch."""
    return rng.permutation(len(batch))


def simsr_loss(policy, target_policy, batch, perm, gamma, stats=None):
    """Mean over pairs of ``(M(cur_i, cur_j) - target)^2``.

    Gradients flow only through the current-tuple measurement; the target uses
    ``target_policy`` on next tuples and is treated as constant.  Pairs where
    any of the four encoder outputs is all-zero (dead ReLUs) have no defined
    cosine; they are dropped from the mean and counted in
    ``stats["degenerate_pairs"]``.  With every pair dead the loss is 0.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = observation(batch.states, batch.goals)
    xn = observation(batch.next_states, batch.goals)
    zi, ti = encode(policy, x)
    zj, tj = encode(policy, x[perm])
    zn = encode(target_policy, xn)[0]
    live = _live_rows(zi, zj, zn, zn[perm])
    n = int(live.sum())
    if stats is not None:
        stats["degenerate_pairs"] += live.size - n
    if n == 0:
        return 0.0, [np.zeros_like(policy.weights[0]), np.zeros_like(policy.biases[0])]
    target = np.zeros(live.size)
    target[live] = (np.abs(batch.rewards[live] - batch.rewards[perm][live])
                    + gamma * measurement_features(zn[live], zn[perm][live]))
    m, du, dv = _masked_measurement_grads(zi, zj, live)
    diff = np.where(live, m - target, 0.0)
    coef = (2.0 / n) * diff[:, None]
    acc = _PairGrad(policy)
    acc.add(ti, coef * du)
    acc.add(tj, coef * dv)
    return float(np.sum(diff * diff) / n), acc.grads


@dataclass
class SarConfig:
    radius: float = 0.1
    beta: float = 1.0
    draws: int = 1
    resample_budget: int = 10

    def __post_init__(self):
        if self.radius <= 0 or self.beta < 0 or self.draws < 1:
            raise ValueError("SAR needs radius > 0, beta >= 0, draws >= 1")


def sample_deltas(rng, shape, config):
    """Uniform draws on the l_inf ball; all-zero rows are redrawn."""
    d = rng.uniform(-config.radius, config.radius, size=shape)
    for _ in range(config.resample_budget):
        zero = np.linalg.norm(d, axis=-1) == 0.0
        if not zero.any():
            return d
        d[zero] = rng.uniform(-config.radius, config.radius, size=(int(zero.sum()), shape[-1]))
    raise DegenerateRepresentation("zero-norm SAR perturbation after resampling")


def sar_regularizer(policy, si, gi, sj, gj, deltas, config, stats=None):
    """Sensitivity-aware regulariser, averaged over rows.

    ``deltas = (d_si, d_gi, d_sj, d_gj)`` are the perturbations; the value is
    ``|M(x_i, x_i + d_si)/|d_si| - M(x_j, x_j + d_sj)/|d_sj||`` plus ``beta``
    times the same with goal perturbations.  A term whose encoder outputs
    include an all-zero row contributes nothing for that row (counted in
    ``stats["degenerate_pairs"]``); the mean is still over all rows.
    """
    d_si, d_gi, d_sj, d_gj = deltas
    acc = _PairGrad(policy)
    n = np.atleast_2d(si).shape[0]
    total = np.zeros(n)

    def ratio(s, g, ds, dg):
        base = observation(s, g)
        pert = observation(s + ds, g + dg)
        zb, tb = encode(policy, base)
        zp, tp = encode(policy, pert)
        live = _live_rows(zb, zp)
        m, du, dv = _masked_measurement_grads(zb, zp, live)
        scale = np.sqrt(np.sum(ds * ds, axis=-1) + np.sum(dg * dg, axis=-1))
        return m / scale, live, (tb, du / scale[:, None]), (tp, dv / scale[:, None])

    zero_s, zero_g = np.zeros_like(si), np.zeros_like(gi)
    for weight, (a_ds, a_dg, b_ds, b_dg) in (
        (1.0, (d_si, zero_g, d_sj, np.zeros_like(gj))),
        (config.beta, (zero_s, d_gi, np.zeros_like(sj), d_gj)),
    ):
        if weight == 0.0:
            continue
        ra, live_a, *tapes_a = ratio(si, gi, a_ds, a_dg)
        rb, live_b, *tapes_b = ratio(sj, gj, b_ds, b_dg)
        live = live_a & live_b
        if stats is not None:
            stats["degenerate_pairs"] += int((~live).sum())
        diff = np.where(live, ra - rb, 0.0)
        total = total + weight * np.abs(diff)
        sgn = (weight / n) * np.sign(diff)[:, None]
        for tape, d in tapes_a:
            acc.add(tape, sgn * d)
        for tape, d in tapes_b:
            acc.add(tape, -sgn * d)
    if acc.grads is None:
        acc.grads = [np.zeros_like(policy.weights[0]), np.zeros_like(policy.biases[0])]
    return float(np.mean(total)), acc.grads


def sar_for_batch(policy, batch, perm, config, rng, stats=None):
    """SAR on the same pairing used by :func:`simsr_loss`, fresh deltas per pair."""
    si, gi = batch.states, batch.goals
    sj, gj = si[perm], gi[perm]
    value, grads = 0.0, None
    for _ in range(config.draws):
        deltas = (sample_deltas(rng, si.shape, config), sample_deltas(rng, gi.shape, config),
                  sample_deltas(rng, sj.shape, config), sample_deltas(rng, gj.shape, config))
        v, g = sar_regularizer(policy, si, gi, sj, gj, deltas, config, stats)
        value += v / config.draws
        g = [x / config.draws for x in g]
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
    return value, grads


# --- tabulated operator ------------------------------------------------------


def simsr_operator(rewards, next_index, M, gamma):
    """Apply the operator to a tabulated metric with fixed sampled successors:
    ``(T M)[i, j] = |r_i - r_j| + gamma * M[next_i, next_j]``."""
    r = np.asarray(rewards, dtype=np.float64)
    nxt = np.asarray(next_index)
    return np.abs(r[:, None] - r[None, :]) + gamma * M[np.ix_(nxt, nxt)]


def simsr_contraction_probe(rewards, next_index, M1, M2, gamma):
    """``||T M1 - T M2||_inf / ||M1 - M2||_inf`` (0 when ``M1 == M2``)."""
    denom = np.max(np.abs(M1 - M2))
    if denom == 0.0:
        return 0.0
    T1 = simsr_operator(rewards, next_index, M1, gamma)
    T2 = simsr_operator(rewards, next_index, M2, gamma)
    return float(np.max(np.abs(T1 - T2)) / denom)
