"""A two-parameter logistic model whose epsilon-ball can be grid-searched."""

from dataclasses import dataclass

import numpy as np

from idiomadv import tensor as T

_CLASS1 = np.array([[0.0, 1.0]])


@dataclass
class ToyBatch:
    x: np.ndarray
    labels: np.ndarray
    attention_mask: object = None


class LogisticProbe:
    """logits = [0, w . (x + delta)] for 2-D inputs."""

    def __init__(self, w):
        self.w = T.Tensor(np.asarray(w, dtype=float).reshape(2, 1), requires_grad=True)

    def embed(self, batch):
        return T.Tensor(batch.x)

    def logits(self, embeddings, batch, dropout_rng=None):
        return T.matmul(embeddings, self.w) * _CLASS1

    def perturbation_mask(self, batch):
        return None


def ce_oracle(w, x, y, delta):
    """Cross-entropy straight from the logistic formula."""
    z = (x + delta) @ np.asarray(w)
    return np.logaddexp(0.0, -z) if y == 1 else np.logaddexp(0.0, z)


def sym_kl_oracle(w, x, delta):
    """Symmetric KL between Bernoulli(sigmoid(z + dz)) and Bernoulli(sigmoid(z))."""
    w = np.asarray(w)
    z = x @ w
    zp = (x + delta) @ w
    p, q = 1.0 / (1.0 + np.exp(-zp)), 1.0 / (1.0 + np.exp(-z))
    return (p - q) * (zp - z)


def grid(eps, per_side=100):
    """Points of the box [-eps, eps]^2 at resolution eps / per_side."""
    axis = np.linspace(-eps, eps, 2 * per_side + 1)
    return np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)


def grid_max(fn, eps, per_side=100):
    """Max of a vectorised ``fn(deltas)`` over the grid."""
    return float(np.max(fn(grid(eps, per_side))))
