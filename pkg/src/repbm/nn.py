"""Small feed-forward networks on top of the autodiff engine."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MLP:
    """ReLU network with fixed input standardisation ``(x - center) / scale``."""

    def __init__(self, sizes, rng: np.random.Generator | None = None,
                 center=None, scale=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = [int(s) for s in sizes]
        self.weights = [Tensor(glorot(rng, a, b), requires_grad=True)
                        for a, b in zip(self.sizes[:-1], self.sizes[1:])]
        self.biases = [Tensor(np.zeros(b), requires_grad=True) for b in self.sizes[1:]]
        d = self.sizes[0]
        self.center = np.zeros(d) if center is None else np.asarray(center, dtype=float)
        self.scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float)

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def normalise(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x) - self.center) / self.scale

    def forward(self, x: np.ndarray) -> Tensor:
        h = Tensor(self.normalise(x))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.bias_add(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        h = self.normalise(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def copy_from(self, other: "MLP") -> None:
        for mine, theirs in zip(self.params, other.params):
            mine.data[...] = theirs.data

    def weight_norm_sq(self) -> float:
        return float(np.sum([np.sum(w.data ** 2) for w in self.weights]))

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "weights": [w.data.tolist() for w in self.weights],
            "biases": [b.data.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls(d["sizes"], center=d["center"], scale=d["scale"])
        for t, v in zip(net.weights, d["weights"]):
            t.data[...] = np.asarray(v, dtype=float)
        for t, v in zip(net.biases, d["biases"]):
            t.data[...] = np.asarray(v, dtype=float)
        return net
