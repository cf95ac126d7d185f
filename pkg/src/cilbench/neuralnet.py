"""A small ReLU multilayer perceptron with hand-written backprop.

All parameters live in one flat float64 vector; the per-layer weight and bias
arrays are views into it, so flattening is free and exact. Gradients use the
same layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_SIZES = (120, 128, 64, 4)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Cache:
    """Activations kept from a forward pass for the backward pass."""

    inputs: list  # input to each dense layer
    pre: list  # pre-activations of hidden layers
    logits: np.ndarray


class Network:
    def __init__(self, sizes=DEFAULT_SIZES, seed=0, rng=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes.append((fan_in, fan_out))
        self.n_params = sum(a * b + b for a, b in shapes)
        self.params = np.zeros(self.n_params)
        self.weights, self.biases = self._views(self.params)
        rng = rng if rng is not None else np.random.default_rng(seed)
        for W in self.weights:
            bound = np.sqrt(6.0 / W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape)

    def _views(self, flat):
        weights, biases = [], []
        off = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            weights.append(flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out))
            off += fan_in * fan_out
            biases.append(flat[off:off + fan_out])
            off += fan_out
        return weights, biases

    def split(self, flat):
        """Per-layer (weights, biases) views of a vector in parameter layout."""
        return self._views(np.asarray(flat))

    @property
    def n_classes(self):
        return self.sizes[-1]

    @property
    def feature_width(self):
        return self.sizes[-2]

    @property
    def head_slice(self):
        n = self.sizes[-2] * self.sizes[-1] + self.sizes[-1]
        return slice(self.n_params - n, self.n_params)

    def get_flat(self):
        return self.params.copy()

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.params.shape:
            raise ValueError(f"expected {self.params.shape[0]} parameters, got {flat.shape}")
        self.params[...] = flat

    def copy(self):
        other = Network.__new__(Network)
        other.sizes = self.sizes
        other.n_params = self.n_params
        other.params = self.params.copy()
        other.weights, other.biases = other._views(other.params)
        return other

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.sizes[0]}")
        return x

    def forward_cache(self, x) -> Cache:
        a = self._check_input(x)
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ W + b
            if i == last:
                return Cache(inputs, pre, z)
            pre.append(z)
            a = np.maximum(z, 0.0)
        raise AssertionError("unreachable")

    def forward(self, x):
        return self.forward_cache(x).logits

    def penultimate_features(self, x):
        """Post-ReLU activations of the last hidden layer."""
        return self.forward_cache(x).inputs[-1]

    def head_logits(self, features):
        return np.asarray(features) @ self.weights[-1] + self.biases[-1]

    def layer_deltas(self, cache: Cache, dlogits):
        """Back-propagated error at the output of every dense layer."""
        deltas = [None] * len(self.weights)
        d = np.asarray(dlogits, dtype=np.float64)
        for i in range(len(self.weights) - 1, -1, -1):
            deltas[i] = d
            if i > 0:
                d = (d @ self.weights[i].T) * (cache.pre[i - 1] > 0)
        return deltas

    def backward(self, cache: Cache, dlogits):
        """Gradient of sum(dlogits * logits) w.r.t. the flat parameters."""
        grad = np.zeros(self.n_params)
        gW, gb = self._views(grad)
        for i, d in enumerate(self.layer_deltas(cache, dlogits)):
            gW[i][...] = cache.inputs[i].T @ d
            gb[i][...] = d.sum(axis=0)
        return grad

    def head_backward(self, features, dlogits):
        """Gradient flowing into the output layer only; zeros elsewhere."""
        grad = np.zeros(self.n_params)
        gW, gb = self._views(grad)
        gW[-1][...] = np.asarray(features).T @ dlogits
        gb[-1][...] = np.asarray(dlogits).sum(axis=0)
        return grad

    def sample_grad_moment(self, cache: Cache, dlogits, kind="square"):
        """Mean over the batch of |g_n|**p for the per-sample gradients g_n.

        Row n of ``dlogits`` is the derivative of sample n's own objective.
        A dense-layer per-sample gradient is an outer product a_n d_n^T, so
        its elementwise square (or abs) factorises and no per-sample tensor
        is ever built.
        """
        f = np.square if kind == "square" else np.abs
        n = cache.logits.shape[0]
        out = np.zeros(self.n_params)
        oW, ob = self._views(out)
        for i, d in enumerate(self.layer_deltas(cache, dlogits)):
            oW[i][...] = f(cache.inputs[i]).T @ f(d) / n
            ob[i][...] = f(d).sum(axis=0) / n
        return out

    def predict(self, x, mask=None):
        logits = self.forward(x)
        if mask is not None:
            logits = np.where(mask_vector(mask, logits.shape[1]), logits, -np.inf)
        return np.argmax(logits, axis=1)

    def to_dict(self):
        return {"sizes": list(self.sizes), "params": self.params.tolist()}

    @classmethod
    def from_dict(cls, d):
        net = cls(d["sizes"], rng=np.random.default_rng(0))
        net.set_flat(d["params"])
        return net

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def mask_vector(mask, n_classes):
    m = np.zeros(n_classes, dtype=bool)
    m[list(mask)] = True
    return m


def masked_softmax(logits, mask, temperature=1.0):
    keep = mask_vector(mask, logits.shape[1])
    z = np.where(keep, logits / temperature, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def masked_cross_entropy(logits, labels, mask):
    """Mean cross-entropy with softmax over the classes in ``mask`` only.

    Returns (loss, dloss/dlogits); the gradient is exactly zero at excluded
    classes.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    allowed = set(int(c) for c in mask)
    if not allowed:
        raise ValueError("empty class mask")
    bad = [int(y) for y in labels if int(y) not in allowed]
    if bad:
        raise ValueError(f"label {bad[0]} outside mask {sorted(allowed)}")
    n = logits.shape[0]
    p = masked_softmax(logits, allowed)
    rows = np.arange(n)
    keep = mask_vector(allowed, logits.shape[1])
    z = np.where(keep, logits, -np.inf)
    zmax = z.max(axis=1)
    logsum = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    loss = float(np.mean(logsum - logits[rows, labels]))
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / n


def loss_and_grad(net: Network, x, labels, mask):
    cache = net.forward_cache(x)
    loss, dlogits = masked_cross_entropy(cache.logits, labels, mask)
    return loss, net.backward(cache, dlogits)


class SGD:
    """Heavy-ball momentum: v <- mu*v + g; theta <- theta - lr*v."""

    def __init__(self, lr=0.01, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def reset(self):
        self.velocity = None

    def step(self, net: Network, grad):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != net.params.shape:
            raise ValueError("gradient not aligned with parameters")
        if not np.all(np.isfinite(grad)):
            bad = np.flatnonzero(~np.isfinite(grad))
            raise NonFiniteError(f"{bad.size} non-finite gradient entries, first at {bad[0]}")
        if self.velocity is None:
            self.velocity = np.zeros_like(grad)
        self.velocity *= self.momentum
        self.velocity += grad
        net.params -= self.lr * self.velocity
        return net
