"""Small dense networks with hand-written backprop and Adam.

Inputs are batches shaped ``(n, n_in)``; a 1-D vector is treated as a batch
of one and the output is squeezed back.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

SCHEMA = "cardlab.densenet/1"


class Activation(str, enum.Enum):
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"
    IDENTITY = "identity"

    def __call__(self, z):
        if self is Activation.SIGMOID:
            return expit(z)
        if self is Activation.SOFTPLUS:
            return np.logaddexp(0.0, z)
        return z

    def grad(self, z, a):
        """Derivative wrt the pre-activation ``z`` given the output ``a``."""
        if self is Activation.SIGMOID:
            return a * (1.0 - a)
        if self is Activation.SOFTPLUS:
            return expit(z)
        return np.ones_like(z)


class DivergenceError(RuntimeError):
    pass


class StaleCacheError(ValueError):
    pass


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.activation = Activation(self.activation)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError("layer wants W (out, in) and b (out,)")


class DenseNet:
    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise ValueError("adjacent layer dimensions do not chain")
        # bumped on every in-place update so old caches can be detected
        self.version = 0

    @property
    def n_in(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1].W.shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def __call__(self, inputs):
        return forward(self, inputs)[0]

    def __repr__(self):
        dims = [self.n_in] + [l.W.shape[0] for l in self.layers]
        acts = ",".join(l.activation.value for l in self.layers)
        return f"DenseNet({'->'.join(map(str, dims))}; {acts})"


def init_net(sizes, activations, rng: np.random.Generator) -> DenseNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(W, b, act))
    return DenseNet(layers)


def cond_mean_net(n_classes: int, rng, out_dim: int = 2) -> DenseNet:
    sig = Activation.SIGMOID
    return init_net([n_classes, 128, 64, out_dim], [sig, sig, Activation.IDENTITY], rng)


def eps_net(rng, y_dim: int = 2, width: int = 64) -> DenseNet:
    sp = Activation.SOFTPLUS
    sizes = [2 * y_dim + 1, width, width, width, y_dim]
    return init_net(sizes, [sp, sp, sp, Activation.IDENTITY], rng)


@dataclass
class Cache:
    inputs: list
    pre: list
    post: list
    squeeze: bool
    net_id: int
    version: int


def forward(net: DenseNet, inputs):
    x = np.asarray(inputs, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.n_in:
        raise ValueError(f"input width {x.shape[1]} != {net.n_in}")
    ins, pres, posts = [], [], []
    for layer in net.layers:
        ins.append(x)
        z = x @ layer.W.T + layer.b
        x = layer.activation(z)
        pres.append(z)
        posts.append(x)
    cache = Cache(ins, pres, posts, squeeze, id(net), net.version)
    return (x[0] if squeeze else x), cache


def backward(net: DenseNet, cache: Cache, output_grad):
    """Reverse-mode pass. Returns ``(param_grads, input_grad)``.

    ``param_grads`` follows :meth:`DenseNet.parameters` ordering.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("cache does not belong to this net state")
    g = np.asarray(output_grad, dtype=float)
    if cache.squeeze:
        g = g[None, :]
    grads = []
    for layer, x, z, a in zip(reversed(net.layers), reversed(cache.inputs),
                              reversed(cache.pre), reversed(cache.post)):
        g = g * layer.activation.grad(z, a)
        grads.append(g.sum(axis=0))
        grads.append(g.T @ x)
        g = g @ layer.W
    grads.reverse()
    return grads, (g[0] if cache.squeeze else g)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: DenseNet, lr: float = 1e-4, **kw) -> "AdamState":
        params = net.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   lr=lr, **kw)


def adam_step(net: DenseNet, state: AdamState, grads):
    params = net.parameters()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradients are not congruent with the parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError(f"non-finite gradient at Adam step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    net.version += 1
    return net, state


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, epoch]))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class PretrainResult:
    net: DenseNet
    losses: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)

    @property
    def final_mse(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def pretrain_cond_mean(samples, epochs: int, seed: int, lr: float = 1e-4, batch: int = 128,
                       snapshot_epochs=()) -> PretrainResult:
    """Fit f(one_hot(x)) ~ y by minibatch MSE with Adam.

    The loss recorded per epoch is the mean squared error (summed over
    output coordinates) across that epoch's minibatches.
    """
    if len(samples) == 0:
        raise ValueError("no samples to fit")
    net = cond_mean_net(samples.n_classes, np.random.Generator(np.random.PCG64([seed, 2**32])),
                        samples.y.shape[1])
    inputs = one_hot(samples.x, samples.n_classes)
    targets = samples.y
    state = AdamState.for_net(net, lr=lr)
    result = PretrainResult(net)
    wanted = set(snapshot_epochs)
    n = len(samples)
    for epoch in range(1, epochs + 1):
        order = epoch_rng(seed, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            out, cache = forward(net, inputs[idx])
            resid = out - targets[idx]
            loss = float(np.mean(np.sum(resid ** 2, axis=1)))
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite pretraining loss at epoch {epoch}")
            grads, _ = backward(net, cache, 2.0 * resid / len(idx))
            adam_step(net, state, grads)
            total += loss * len(idx)
        result.losses.append(total / n)
        if epoch in wanted:
            result.snapshots[epoch] = net.copy()
    return result


def net_to_dict(net: DenseNet) -> dict:
    return {
        "schema": SCHEMA,
        "layers": [
            {
                "in": int(l.W.shape[1]),
                "out": int(l.W.shape[0]),
                "activation": l.activation.value,
                "weight": [float(w) for w in l.W.ravel()],
                "bias": [float(b) for b in l.b],
            }
            for l in net.layers
        ],
    }


def net_from_dict(data: dict) -> DenseNet:
    if data.get("schema") != SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {data.get('schema')!r}")
    layers = []
    for entry in data["layers"]:
        W = np.array(entry["weight"], dtype=float).reshape(entry["out"], entry["in"])
        layers.append(Layer(W, np.array(entry["bias"], dtype=float), entry["activation"]))
    return DenseNet(layers)


def save_net(net: DenseNet, path) -> None:
    Path(path).write_text(json.dumps(net_to_dict(net)))


def load_net(path) -> DenseNet:
    return net_from_dict(json.loads(Path(path).read_text()))
