"""Shared fixtures-by-function for the test suite."""

import numpy as np

from miattack import nn


class FixedGradient:
    """Gradient source returning a constant gradient (optionally per example)."""

    def __init__(self, grad, loss=1.0, num_classes=10):
        self.grad = np.asarray(grad, dtype=np.float64)
        self.loss = loss
        self.name = "fixed"
        self.input_shape = self.grad.shape
        self.num_classes = num_classes
        self.calls = []

    def __call__(self, x, y):
        self.calls.append((np.array(x), np.array(y)))
        g = np.broadcast_to(self.grad, x.shape).copy()
        return np.full(len(x), float(self.loss)), g


def linear_model(weights, bias=None, name="linear"):
    w = np.asarray(weights, dtype=np.float64)
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return nn.Model((w.shape[1],), w.shape[0], [nn.Dense(w, b)], {"name": name})


def random_small_model(rng, kind=None):
    """Random network with at most 3 parametric layers and <= 64 units."""
    kind = kind or rng.choice(["mlp", "mlp2", "cnn"])
    if kind == "cnn":
        c, h = int(rng.integers(1, 3)), int(rng.integers(6, 9))
        k = int(rng.integers(2, 5))
        conv = nn.Conv2D(rng.normal(0, 0.7, (k, c, 3, 3)), rng.normal(0, 0.1, k))
        hp = (h - 2) // 2
        dense = nn.Dense(rng.normal(0, 0.5, (4, k * hp * hp)), rng.normal(0, 0.1, 4))
        layers = [conv, nn.ReLU(), nn.MaxPool2x2(), nn.Flatten(), dense]
        return nn.Model((c, h, h), 4, layers, {"name": f"cnn{k}"})
    d = int(rng.integers(3, 12))
    hidden = int(rng.integers(4, 64))
    classes = int(rng.integers(2, 6))
    layers = [nn.Dense(rng.normal(0, 1.0, (hidden, d)), rng.normal(0, 0.2, hidden)), nn.ReLU()]
    if kind == "mlp2":
        h2 = int(rng.integers(4, 32))
        layers += [nn.Dense(rng.normal(0, 0.5, (h2, hidden)), rng.normal(0, 0.2, h2)),
                   nn.ReLU()]
        hidden = h2
    layers.append(nn.Dense(rng.normal(0, 0.5, (classes, hidden)), rng.normal(0, 0.2, classes)))
    return nn.Model((d,), classes, layers, {"name": f"{kind}{hidden}"})


def central_difference(f, x, h=1e-5):
    """Per-coordinate central finite differences of the scalar function ``f``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def relative_error(analytic, numeric):
    """Largest coordinate error relative to the gradient's scale."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)
