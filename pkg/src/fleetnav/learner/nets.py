"""Gradients and optimization for MlpSpec networks, no framework involved.

forward_cached/backward implement reverse-mode differentiation for the plain
affine+activation chain; Adam carries its moment estimates per parameter
tensor. Arithmetic follows the network's own dtype: float32 in production to
match the snapshot format, float64 when a gradient check upcasts the weights.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericalDivergence
from ..policy import MlpSpec


def forward_cached(spec: MlpSpec, x: np.ndarray) -> tuple:
    """Forward pass keeping what backward needs. x is (B, in)."""
    h = np.asarray(x, dtype=spec.weights[0].dtype)
    inputs = []  # input to each layer
    pre = []  # pre-activation of each layer
    for w, b, act in zip(spec.weights, spec.biases, spec.activations):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        if act == "relu":
            h = np.maximum(z, 0.0)
        elif act == "tanh":
            h = np.tanh(z)
        else:
            h = z
    return h, (inputs, pre)


def backward(spec: MlpSpec, cache: tuple, grad_out: np.ndarray) -> tuple:
    """Backprop grad_out (B, out) through the net.

    Returns (grads, grad_input) where grads is a list of (dW, db) per layer
    summed over the batch; normalize in the loss before calling.
    """
    inputs, pre = cache
    g = np.asarray(grad_out, dtype=spec.weights[0].dtype)
    grads = [None] * len(spec.weights)
    for i in reversed(range(len(spec.weights))):
        act = spec.activations[i]
        if act == "relu":
            g = g * (pre[i] > 0.0)
        elif act == "tanh":
            t = np.tanh(pre[i])
            g = g * (1.0 - t * t)
        grads[i] = (g.T @ inputs[i], g.sum(axis=0))
        g = g @ spec.weights[i]
    return grads, g


class Adam:
    """Standard Adam over one MlpSpec's parameter list."""

    def __init__(self, spec: MlpSpec, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b))
                  for w, b in zip(spec.weights, spec.biases)]
        self.v = [(np.zeros_like(w), np.zeros_like(b))
                  for w, b in zip(spec.weights, spec.biases)]

    def step(self, spec: MlpSpec, grads: list) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (dw, db) in enumerate(grads):
            for j, (param, grad) in enumerate(
                    ((spec.weights[i], dw), (spec.biases[i], db))):
                m = self.m[i][j]
                v = self.v[i][j]
                m += (1.0 - self.beta1) * (grad - m)
                v += (1.0 - self.beta2) * (grad * grad - v)
                param -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ScalarAdam:
    """Adam for a single scalar (the entropy temperature)."""

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = 0.0
        self.v = 0.0

    def step(self, value: float, grad: float) -> float:
        self.t += 1
        self.m += (1.0 - self.beta1) * (grad - self.m)
        self.v += (1.0 - self.beta2) * (grad * grad - self.v)
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def polyak_update(target: MlpSpec, online: MlpSpec, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, in place."""
    for tw, ow in zip(target.weights, online.weights):
        tw += tau * (ow - tw)
    for tb, ob in zip(target.biases, online.biases):
        tb += tau * (ob - tb)


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalDivergence(f"{name} produced non-finite values")
