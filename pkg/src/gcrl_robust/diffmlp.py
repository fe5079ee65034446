"""Feed-forward ReLU networks with hand-written reverse-mode gradients.

Every network in the package (encoder/actor, critic, value and discriminator
heads) is an :class:`Mlp`.  A network maps ``dims[0] -> dims[-1]`` through
``depth`` affine layers, with ReLU after every layer except the last.  All
arithmetic is float64.

Inputs may be a single vector ``(D,)`` or a batch ``(B, D)``.  With a batch,
gradients are those of the *sum* over rows of ``output . cotangent``, so each
row's input gradient is exactly the per-sample gradient.

Layers are numbered from 1 when selecting a representation: ``layer_output(1)``
is the ReLU activation after the first affine map, ``layer_output(depth)`` is
the raw network output.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericalError

CHECKPOINT_MAGIC = b"MLPW"
CHECKPOINT_VERSION = 1


@dataclass
class Tape:
    """Intermediates cached by one forward pass.

    ``inputs[i]`` is the input of affine layer ``i`` (0-based) and
    ``preacts[i]`` its pre-activation.  ``depth`` is the number of layers that
    were actually evaluated, which is less than the network depth for a
    truncated forward.
    """

    inputs: list
    preacts: list
    batched: bool

    @property
    def depth(self):
        return len(self.preacts)

    def layer_output(self, layer, net_depth):
        if not 1 <= layer <= self.depth:
            raise DimensionError(f"layer {layer} not recorded (tape depth {self.depth})")
        z = self.preacts[layer - 1]
        out = z if layer == net_depth else np.maximum(z, 0.0)
        return out if self.batched else out[0]


class Mlp:
    """Affine-ReLU chain ``W_L relu(... relu(W_1 x + b_1) ...) + b_L``.

    Weights are stored ``(out, in)`` so ``weights[i]`` maps ``dims[i]`` to
    ``dims[i+1]``.  With ``use_bias=False`` biases stay at zero and receive no
    gradient.
    """

    def __init__(self, weights, biases, use_bias=True, seed_lineage=()):
        if len(weights) != len(biases) or not weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i + 1}: weight {w.shape} incompatible with bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i + 1}: expects {w.shape[1]} inputs but layer {i} emits "
                    f"{self.weights[i - 1].shape[0]}"
                )
        self.use_bias = bool(use_bias)
        if not self.use_bias:
            for b in self.biases:
                b[:] = 0.0
        self.seed_lineage = tuple(int(s) for s in seed_lineage)

    @classmethod
    def init(cls, dims, rng, use_bias=True, seed_lineage=()):
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialisation."""
        if len(dims) < 2:
            raise DimensionError("an Mlp needs at least input and output dims")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, use_bias=use_bias, seed_lineage=seed_lineage)

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def depth(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def params(self):
        """Parameter arrays, interleaved ``[W1, b1, W2, b2, ...]`` (live views)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def param_names(self):
        return [f"{k}{i + 1}" for i in range(self.depth) for k in ("W", "b")]

    def copy(self):
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            use_bias=self.use_bias,
            seed_lineage=self.seed_lineage,
        )

    def truncated(self, layers):
        """The first ``layers`` layers as a standalone net (last one left linear)."""
        return Mlp(self.weights[:layers], self.biases[:layers], self.use_bias, self.seed_lineage)

    def assign(self, params):
        for dst, src in zip(self.params, params):
            dst[...] = src

    def __call__(self, x):
        return forward(self, x)[0]

    def __eq__(self, other):
        if not isinstance(other, Mlp) or self.dims != other.dims:
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.params, other.params))

    __hash__ = None


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim == 1:
        x = x[None, :]
    elif x.ndim != 2:
        raise DimensionError(f"input must be 1-D or 2-D, got shape {x.shape}")
    if x.shape[1] != net.in_dim:
        raise DimensionError(f"layer 1 expects {net.in_dim} inputs, got {x.shape[1]}")
    return x, batched


def forward(net, x, upto=None):
    """Evaluate ``net`` on ``x``.

    Returns ``(output, tape)``.  With ``upto=l`` only the first ``l`` layers are
    evaluated and ``output`` is the layer-``l`` activation (ReLU applied unless
    ``l`` is the final layer).
    """
    x, batched = _as_batch(net, x)
    depth = net.depth if upto is None else int(upto)
    if not 1 <= depth <= net.depth:
        raise DimensionError(f"layer {upto} outside 1..{net.depth}")
    inputs, preacts = [], []
    h = x
    for i in range(depth):
        inputs.append(h)
        z = h @ net.weights[i].T + net.biases[i]
        preacts.append(z)
        h = z if i == net.depth - 1 else np.maximum(z, 0.0)
    tape = Tape(inputs, preacts, batched)
    return (h if batched else h[0]), tape


def backward(net, tape, cotangent, layer=None, want_params=True):
    """Reverse pass from the layer-``layer`` output (default: the recorded top).

    Returns ``(input_gradient, param_gradients)``; ``param_gradients`` matches
    ``net.params`` and is ``None`` when ``want_params`` is false.  The ReLU
    derivative at exactly zero is taken as 0.
    """
    layer = tape.depth if layer is None else int(layer)
    if not 1 <= layer <= tape.depth:
        raise DimensionError(f"layer {layer} not recorded (tape depth {tape.depth})")
    width = net.weights[layer - 1].shape[0]
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.ndim == 1:
        cot = cot[None, :]
    batch = tape.inputs[0].shape[0]
    if cot.shape != (batch, width):
        raise DimensionError(f"cotangent shape {cot.shape} does not match layer {layer} output ({batch}, {width})")

    delta = cot if layer == net.depth else cot * (tape.preacts[layer - 1] > 0.0)
    grads = [None] * (2 * net.depth) if want_params else None
    gx = None
    for i in range(layer - 1, -1, -1):
        if want_params:
            grads[2 * i] = delta.T @ tape.inputs[i]
            grads[2 * i + 1] = delta.sum(axis=0) if net.use_bias else np.zeros(net.biases[i].shape)
        g = delta @ net.weights[i]
        if i:
            delta = g * (tape.preacts[i - 1] > 0.0)
        else:
            gx = g
    if want_params:
        for i in range(layer, net.depth):
            grads[2 * i] = np.zeros_like(net.weights[i])
            grads[2 * i + 1] = np.zeros_like(net.biases[i])
    if not tape.batched:
        gx = gx[0]
    return gx, grads


def grad_input(net, tape, cotangent, layer=None):
    return backward(net, tape, cotangent, layer=layer, want_params=False)[0]


def grad_params(net, tape, cotangent, layer=None):
    return backward(net, tape, cotangent, layer=layer, want_params=True)[1]


# --- optimiser -------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    names: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr=1e-3, names=None, **kw):
        names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], names, lr=lr, **kw)

    def copy(self):
        return AdamState(
            [m.copy() for m in self.m], [v.copy() for v in self.v], list(self.names),
            self.lr, self.beta1, self.beta2, self.eps, self.step,
        )


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise DimensionError("params, grads and optimizer state differ in length")
    for name, p, g in zip(state.names, params, grads):
        if p.shape != np.shape(g):
            raise DimensionError(f"gradient for {name} has shape {np.shape(g)}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {name}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- checkpoint container --------------------------------------------------
#
# Layout (all integers little-endian):
#   4s   magic "MLPW"
#   u16  format version
#   u32  header length H
#   H    UTF-8 JSON header: {"depth", "dims", "use_bias", "seed_lineage"}
#   per layer i = 1..depth:
#     u32 rows, u32 cols
#     rows*cols float64 weights, row-major
#     rows float64 biases


def mlp_to_bytes(net):
    header = json.dumps(
        {"depth": net.depth, "dims": net.dims, "use_bias": net.use_bias,
         "seed_lineage": list(net.seed_lineage)},
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for w, b in zip(net.weights, net.biases):
        buf.write(struct.pack("<II", *w.shape))
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def mlp_from_bytes(data):
    view = memoryview(data)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError("not an MLP checkpoint")
    version, hlen = struct.unpack_from("<HI", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported MLP checkpoint version {version}")
    off = 10
    header = json.loads(bytes(view[off:off + hlen]))
    off += hlen
    weights, biases = [], []
    for _ in range(header["depth"]):
        rows, cols = struct.unpack_from("<II", view, off)
        off += 8
        w = np.frombuffer(view, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        off += 8 * rows * cols
        b = np.frombuffer(view, dtype="<f8", count=rows, offset=off)
        off += 8 * rows
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(view):
        raise ValueError("trailing bytes after MLP checkpoint")
    net = Mlp(weights, biases, use_bias=header["use_bias"], seed_lineage=header["seed_lineage"])
    if net.dims != header["dims"]:
        raise ValueError("checkpoint header dims disagree with stored layers")
    return net


def save_mlp(net, path):
    with open(path, "wb") as fh:
        fh.write(mlp_to_bytes(net))


def load_mlp(path):
    with open(path, "rb") as fh:
        return mlp_from_bytes(fh.read())


def flat_norm(arrays):
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))

