"""Synchronous sGIN: sum neighbour states, apply a linear layer, then ReLU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InvalidArgument
from .graph import Graph


@dataclass(frozen=True)
class SginWeights:
    W: np.ndarray
    b: np.ndarray | None = None

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ContractViolation(f"sGIN layer must be square, got {W.shape}")
        if not np.isfinite(W).all():
            raise InvalidArgument("non-finite sGIN weights")
        b = np.zeros(W.shape[0]) if self.b is None else np.asarray(self.b, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise ContractViolation(f"bias shape {b.shape} != ({W.shape[0]},)")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def d(self) -> int:
        return self.W.shape[0]

    def apply(self, total: np.ndarray) -> np.ndarray:
        return np.maximum(self.W @ total + self.b, 0.0)


@dataclass(frozen=True)
class SginModel:
    layers: tuple[SginWeights, ...]
    d: int

    def __post_init__(self):
        for w in self.layers:
            if w.d != self.d:
                raise ContractViolation(f"layer width {w.d} != model width {self.d}")

    @property
    def L(self) -> int:
        return len(self.layers)

    @classmethod
    def random(cls, d: int, L: int, rng: np.random.Generator, scale: float = 1.0,
               bias: bool = False) -> "SginModel":
        layers = []
        for _ in range(L):
            W = rng.uniform(-scale, scale, size=(d, d))
            b = rng.uniform(-scale, scale, size=d) if bias else None
            layers.append(SginWeights(W, b))
        return cls(tuple(layers), d)


def sgin_forward(g: Graph, model: SginModel, features: np.ndarray | None = None) -> np.ndarray:
    """Return the (n, d) node states after all layers."""
    h = np.array(g.features if features is None else features, dtype=np.float64)
    if h.shape != (g.n, model.d):
        raise ContractViolation(f"features {h.shape} do not match (n={g.n}, d={model.d})")
    for layer in model.layers:
        sums = np.zeros_like(h)
        for v in range(g.n):
            for u in g.adjacency[v]:
                sums[v] += h[u]
        h = np.maximum(sums @ layer.W.T + layer.b, 0.0)
    return h
