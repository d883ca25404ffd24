"""
Small tanh MLPs with hand-written reverse-mode gradients.

Inputs are affinely normalized (``(z - in_shift) / in_scale``) and outputs
rescaled by ``out_scale`` before leaving the network.  These constants are
fixed at construction and are not trained.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, h: 1.0 - h * h),
    "identity": (lambda a: a, lambda a, h: np.ones_like(a)),
}


@dataclass
class Mlp:
    layer_sizes: List[int]
    weights: List[np.ndarray]  # (fan_out, fan_in)
    biases: List[np.ndarray]
    activation: str = "tanh"
    in_shift: Optional[np.ndarray] = None
    in_scale: Optional[np.ndarray] = None
    out_scale: Optional[np.ndarray] = None
    seed: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        n_in, n_out = self.layer_sizes[0], self.layer_sizes[-1]
        self.in_shift = np.zeros(n_in) if self.in_shift is None else np.asarray(self.in_shift, float)
        self.in_scale = np.ones(n_in) if self.in_scale is None else np.asarray(self.in_scale, float)
        self.out_scale = np.ones(n_out) if self.out_scale is None else np.asarray(self.out_scale, float)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[i + 1], self.layer_sizes[i]) or b.shape != (W.shape[0],):
                raise ValueError(f"layer {i} has shape {W.shape}, bias {b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @property
    def params(self):
        """Trainable arrays in the order ``W0, b0, W1, b1, ...``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def n_params(self):
        return sum(p.size for p in self.params)

    def copy(self):
        return Mlp(list(self.layer_sizes), [W.copy() for W in self.weights],
                   [b.copy() for b in self.biases], self.activation, self.in_shift.copy(),
                   self.in_scale.copy(), self.out_scale.copy(), self.seed, dict(self.metadata))

    def __call__(self, z):
        return forward(self, z)

    # ------------------------------------------------------------ (de)serialize
    def to_dict(self):
        return {
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "in_shift": self.in_shift.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_scale": self.out_scale.tolist(),
            "seed": self.seed,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["layer_sizes"], [np.array(W, dtype=float) for W in d["weights"]],
                   [np.array(b, dtype=float) for b in d["biases"]], d.get("activation", "tanh"),
                   d.get("in_shift"), d.get("in_scale"), d.get("out_scale"), d.get("seed"),
                   d.get("metadata", {}))


def init_mlp(layer_sizes, seed=0, activation="tanh", in_shift=None, in_scale=None, out_scale=None):
    """Uniform ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` initialization."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, fan_out))
    return Mlp(list(layer_sizes), weights, biases, activation, in_shift, in_scale, out_scale, seed)


def zero_mlp(layer_sizes, activation="tanh"):
    return Mlp(list(layer_sizes), [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])],
               [np.zeros(o) for o in layer_sizes[1:]], activation)


def _check_input(net, z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != net.n_in:
        raise ValueError(f"input has {z.shape[-1]} features, network expects {net.n_in}")
    return z


def forward_cached(net: Mlp, z):
    """Forward pass over a batch ``(..., n_in)`` that also returns the tape."""
    z = _check_input(net, z)
    lead = z.shape[:-1]
    h = ((z - net.in_shift) / net.in_scale).reshape(-1, net.n_in)
    act, _ = ACTIVATIONS[net.activation]
    tape = [h]
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W.T + b
        h = a if i == last else act(a)
        tape.append(h)
    out = (h * net.out_scale).reshape(lead + (net.n_out,))
    return out, (lead, tape)


def forward(net: Mlp, z):
    return forward_cached(net, z)[0]


def backward_cached(net: Mlp, cache, cotangent):
    """Vector-Jacobian product from a tape produced by ``forward_cached``.

    Parameter gradients are summed over the batch.  Returns
    ``(param_grads, input_grad)`` where ``param_grads`` follows ``net.params``.
    """
    lead, tape = cache
    _, dact = ACTIVATIONS[net.activation]
    g = np.asarray(cotangent, dtype=float).reshape(-1, net.n_out) * net.out_scale
    grads = [None] * (2 * len(net.weights))
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            h = tape[i + 1]
            g = g * dact(None, h)
        grads[2 * i] = g.T @ tape[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i]
    dz = (g / net.in_scale).reshape(lead + (net.n_in,))
    return grads, dz


def backward(net: Mlp, z, output_cotangent):
    """Exact gradients of ``<forward(net, z), output_cotangent>``."""
    out, cache = forward_cached(net, z)
    cot = np.asarray(output_cotangent, dtype=float)
    if cot.shape != out.shape:
        raise ValueError(f"cotangent shape {cot.shape} does not match output {out.shape}")
    return backward_cached(net, cache, cot)


# ------------------------------------------------------------------ optimizer

@dataclass
class OptimState:
    """Adam accumulators plus bookkeeping."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gradient_clip: Optional[float] = None
    step_count: int = 0
    skipped: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net, **kw):
        st = cls(**kw)
        st.m = [np.zeros_like(p) for p in net.params]
        st.v = [np.zeros_like(p) for p in net.params]
        return st


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, bound):
    norm = global_norm(grads)
    if bound is None or norm <= bound:
        return grads
    return [g * (bound / norm) for g in grads]


def optimizer_step(net: Mlp, grads, state: OptimState, learning_rate=None):
    """One Adam update, in place.  Non-finite gradients skip the update."""
    params = net.params
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameters")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return net, state
    grads = clip_gradients(grads, state.gradient_clip)
    lr = state.learning_rate if learning_rate is None else learning_rate
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


def save_checkpoint(path, nets: dict, **metadata):
    doc = {name: net.to_dict() for name, net in nets.items()}
    doc["metadata"] = metadata
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    meta = doc.pop("metadata", {})
    return {k: Mlp.from_dict(v) for k, v in doc.items()}, meta
