"""Independent reference computations shared by the test modules."""
import contextlib

import numpy as np

from gcrl_robust import diffmlp


def straight_line(weights, biases, x):
    """Affine-ReLU chain evaluated neuron by neuron with Python floats."""
    h = [float(v) for v in x]
    for k, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for i in range(W.shape[0]):
            s = float(b[i])
            for j in range(W.shape[1]):
                s += float(W[i, j]) * h[j]
            out.append(s if k == len(weights) - 1 else max(s, 0.0))
        h = out
    return np.array(h)


@contextlib.contextmanager
def relu_patterns():
    """Record the sign pattern of every pre-activation computed inside the block."""
    seen = []
    original = diffmlp.Tape

    class Recording(original):
        def __init__(self, inputs, preacts, batched):
            super().__init__(inputs, preacts, batched)
            seen.extend((p > 0.0).tobytes() for p in preacts)

    diffmlp.Tape = Recording
    try:
        yield seen
    finally:
        diffmlp.Tape = original


def directional_error(f, arrays, grads, rng, h=1e-6, tries=20):
    """Relative error between ``<grad, v>`` and a central difference along ``v``.

    ``f()`` evaluates the scalar with ``arrays`` modified in place.  Directions
    whose +-h probes land in different ReLU activation regions are redrawn, so
    the comparison is always made on a smooth piece.
    """
    orig = [a.copy() for a in arrays]
    try:
        for _ in range(tries):
            v = [rng.standard_normal(a.shape) for a in arrays]
            n = np.sqrt(sum(float(np.sum(d * d)) for d in v))
            v = [d / n for d in v]
            vals, pats = [], []
            for sign in (1.0, -1.0):
                for a, o, d in zip(arrays, orig, v):
                    a[...] = o + sign * h * d
                with relu_patterns() as seen:
                    vals.append(float(f()))
                pats.append(seen)
            for a, o in zip(arrays, orig):
                a[...] = o
            if pats[0] != pats[1]:
                continue
            fd = (vals[0] - vals[1]) / (2 * h)
            an = sum(float(np.sum(g * d)) for g, d in zip(grads, v))
            return abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        raise AssertionError("every probe direction crossed a ReLU kink")
    finally:
        for a, o in zip(arrays, orig):
            a[...] = o


def random_mlp(rng, dims, scale=1.0):
    net = diffmlp.Mlp.init(dims, rng)
    for p in net.params:
        p *= scale
    return net


# --- gradient cases for every loss -------------------------------------------

def small_bundle(rng, algo="ddpg", width=8):
    from gcrl_robust import agents, gcenv
    env = gcenv.make_env("PointReach")
    cfg = agents.AgentConfig(algo=algo, encoder_width=width, hidden=width)
    return agents.AgentBundle.build(env, cfg, seed=int(rng.integers(2**31)))


def random_batch(rng, n=6, ds=4, dg=2, da=2):
    from gcrl_robust.gcenv import Batch
    return Batch(rng.standard_normal((n, ds)), rng.uniform(-1, 1, (n, da)), rng.standard_normal((n, ds)),
                 rng.standard_normal((n, dg)), rng.integers(0, 2, n).astype(float), rng.standard_normal((n, ds)))


def loss_cases(seed, width=8):
    """Yield ``(name, f, arrays, grads)`` for every differentiable loss.

    ``f()`` recomputes the scalar from the current contents of ``arrays``.
    """
    from gcrl_robust import agents, attacks, simsr
    rng = np.random.default_rng(seed)
    width = int(rng.integers(4, width + 1))
    b = small_bundle(rng, "ddpg", width)
    batch = random_batch(rng)
    y = agents.bellman_target(b, batch)

    lc = agents.ddpg_critic_loss(b, batch, target=y)
    yield "ddpg_critic", lambda: agents.ddpg_critic_loss(b, batch, target=y).value, b.critic.params, lc.grads["critic"]
    la = agents.ddpg_actor_loss(b, batch)
    yield "ddpg_actor", lambda: agents.ddpg_actor_loss(b, batch).value, b.policy.params, la.grads["policy"]
    lg = agents.gcsl_loss(b, batch)
    yield "gcsl", lambda: agents.gcsl_loss(b, batch).value, b.policy.params, lg.grads["policy"]

    g = small_bundle(rng, "gofar", width)
    gl = agents.gofar_losses(g, batch)
    yield "gofar_value", lambda: agents.gofar_losses(g, batch).value.value, g.aux.value.params, gl.value.grads["value"]
    yield "gofar_policy", lambda: agents.gofar_losses(g, batch).policy.value, g.policy.params, gl.policy.grads["policy"]
    yield ("gofar_discriminator", lambda: agents.gofar_losses(g, batch).discriminator.value,
           g.aux.discriminator.params, gl.discriminator.grads["discriminator"])

    perm = rng.permutation(len(batch))
    v, sg = simsr.simsr_loss(b.policy, b.target_policy, batch, perm, b.gamma)
    yield ("simsr", lambda: simsr.simsr_loss(b.policy, b.target_policy, batch, perm, b.gamma)[0],
           b.policy.params[:2], sg)
    cfg = simsr.SarConfig(beta=float(rng.uniform(0.5, 2.0)))
    si, gi, sj, gj = batch.states, batch.goals, batch.states[perm], batch.goals[perm]
    deltas = tuple(simsr.sample_deltas(rng, x.shape, cfg) for x in (si, gi, sj, gj))
    _, rg = simsr.sar_regularizer(b.policy, si, gi, sj, gj, deltas, cfg)
    yield ("sar", lambda: simsr.sar_regularizer(b.policy, si, gi, sj, gj, deltas, cfg)[0],
           b.policy.params[:2], rg)

    layer = int(rng.integers(1, 4))
    adv_s, adv_g = batch.states.copy(), batch.goals.copy()
    ns, ng = attacks.negative_tuple(adv_s, adv_g, "state+goal")
    _, gs, gg = attacks.scr_similarity_loss(b.policy, adv_s, adv_g, ns, ng, layer)
    yield (f"scr_sim_L{layer}", lambda: attacks.scr_similarity_loss(b.policy, adv_s, adv_g, ns, ng, layer)[0].sum(),
           [adv_s, adv_g], [gs, gg])
    s2, g2 = batch.states.copy(), batch.goals.copy()
    _, gs, gg = attacks.sa_loss(b, s2, g2)
    yield "sa_input", lambda: attacks.sa_loss(b, s2, g2)[0].sum(), [s2, g2], [gs, gg]
