"""Fully connected ELU networks with hand-written backprop, and Adam."""

from dataclasses import dataclass, field

import numpy as np


def elu(v):
    """ELU with alpha=1: ``v`` for ``v > 0``, ``exp(v) - 1`` otherwise."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v > 0, v, np.expm1(np.minimum(v, 0.0)))


def elu_grad(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v > 0, 1.0, np.exp(np.minimum(v, 0.0)))


@dataclass
class Mlp:
    """Affine layers with ELU on every hidden layer and identity output.

    ``weights[i]`` has shape ``(sizes[i+1], sizes[i])`` so a layer computes
    ``W @ h + b``. Inputs may be a single vector or a batch of row vectors.
    """

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input {w.shape[1]} != previous output {self.weights[i-1].shape[0]}")

    @classmethod
    def init(cls, sizes, rng):
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes):
        return cls(
            [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
        )

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x):
        """Return ``(output, tape)``; the tape feeds :meth:`backward`."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {h.shape[-1]} features, network expects {self.sizes[0]}")
        tape = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w.T + b
            tape.append((h, pre))
            h = pre if i == last else elu(pre)
        return h, tape

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, tape, out_grad, param_grads=True):
        """Reverse pass for the scalar ``sum(out_grad * output)``.

        Returns ``(grads, input_grad)`` where ``grads`` is a flat list
        matching :meth:`params` (``None`` if ``param_grads`` is false). For
        batched input, parameter gradients are summed over the batch.
        """
        g = np.asarray(out_grad, dtype=np.float64)
        grads = [] if param_grads else None
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h, pre = tape[i]
            if i != last:
                g = g * elu_grad(pre)
            if param_grads:
                if g.ndim == 1:
                    gw, gb = np.outer(g, h), g.copy()
                else:
                    gw, gb = g.T @ h, g.sum(axis=0)
                grads[:0] = [gw, gb]
            g = g @ self.weights[i]
        return grads, g

    def all_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params())


@dataclass
class Adam:
    """Adam with bias correction, updating a list of arrays in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ValueError("gradient shapes do not match parameters")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params
