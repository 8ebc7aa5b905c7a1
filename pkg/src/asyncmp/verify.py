"""Randomised equivalence suites used by the CLI and the acceptance tests."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

import numpy as np

from .engine import DelayModel
from .graph import Graph
from .sync_baseline import SginModel, SginWeights, sgin_forward
from .synchronizer import build_exact_transition_mlp, reduced_transition, simulate_sgin

SIM_TOLERANCE = 1e-9
MLP_TOLERANCE = 1e-12


def random_bounded_graph(n: int, max_degree: int, rng: random.Random,
                         extra_edges: int | None = None) -> Graph:
    """Connected graph with every degree <= ``max_degree`` (tree plus random chords)."""
    deg = [0] * n
    edges = set()
    order = list(range(n))
    rng.shuffle(order)
    for i in range(1, n):
        v = order[i]
        choices = [u for u in order[:i] if deg[u] < max_degree]
        u = rng.choice(choices)
        edges.add((min(u, v), max(u, v)))
        deg[u] += 1
        deg[v] += 1
    extra = rng.randint(0, n) if extra_edges is None else extra_edges
    for _ in range(extra):
        u, v = rng.sample(range(n), 2) if n > 1 else (0, 0)
        e = (min(u, v), max(u, v))
        if u != v and e not in edges and deg[u] < max_degree and deg[v] < max_degree:
            edges.add(e)
            deg[u] += 1
            deg[v] += 1
    return Graph.from_edges(n, sorted(edges))


@dataclass
class SimReport:
    graphs: int
    max_deviation: float
    per_delay: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_deviation < SIM_TOLERANCE

    def to_dict(self) -> dict:
        return {"graphs": self.graphs, "max_deviation": self.max_deviation,
                "per_delay": self.per_delay, "passed": self.passed,
                "tolerance": SIM_TOLERANCE, "seconds": round(self.seconds, 3)}


def verify_sim(graphs: int = 50, max_n: int = 12, layers: int = 3, seed: int = 0,
               max_degree: int = 5, d: int = 3) -> SimReport:
    """Synchronizer output vs the synchronous oracle, constant and uniform delays.

    Layer counts cycle through ``1..layers``; start nodes and weights are random.
    """
    t0 = time.perf_counter()
    rng = random.Random(seed)
    nrng = np.random.default_rng(seed)
    worst = {"constant": 0.0, "uniform": 0.0}
    for i in range(graphs):
        n = rng.randint(2, max_n)
        g = random_bounded_graph(n, max_degree, rng)
        L = 1 + i % layers
        model = SginModel.random(d, L, nrng, scale=0.5, bias=True)
        x = nrng.uniform(-1, 1, size=(n, d))
        want = sgin_forward(g, model, x)
        start = rng.randrange(n)
        for kind, delay in (("constant", DelayModel.constant()),
                            ("uniform", DelayModel.uniform(0.0, 1.0, rng.randrange(2 ** 31)))):
            got = simulate_sgin(g, model, start=start, delay=delay, features=x)
            worst[kind] = max(worst[kind], float(np.abs(got - want).max()))
    return SimReport(graphs, max(worst.values()), worst, time.perf_counter() - t0)


@dataclass
class MlpReport:
    samples: int
    branch_mismatches: int
    max_error: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.branch_mismatches == 0 and self.max_error <= MLP_TOLERANCE

    def to_dict(self) -> dict:
        return {"samples": self.samples, "branch_mismatches": self.branch_mismatches,
                "max_error": self.max_error, "passed": self.passed,
                "tolerance": MLP_TOLERANCE, "seconds": round(self.seconds, 3)}


def _branch(safe: int, u: int) -> int:
    return 0 if safe else (1 if u == 0 else 2)


def verify_mlp(samples: int = 10_000, seed: int = 0, bound: float = 100.0) -> MlpReport:
    """Exact MLP vs the reduced transition on random in-domain inputs.

    ``max_error`` is relative to ``max(1, |expected|)``. The branch an output
    belongs to is the candidate (keep / apply / add) it is nearest to.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    mismatches = 0
    worst = 0.0
    cache = {}
    for _ in range(samples):
        D = int(rng.integers(1, 7))
        d = int(rng.integers(1, 5))
        key = (D, d, int(rng.integers(0, 8)))
        if key not in cache:
            w = SginWeights(rng.uniform(-1, 1, (d, d)), rng.uniform(-1, 1, d))
            cache[key] = (w, build_exact_transition_mlp(D, d, w, bound))
        weights, mlp = cache[key]
        s = rng.uniform(-bound, bound, d)
        m = rng.uniform(-bound, bound, d)
        bit = int(rng.integers(0, 3))
        pulse, safe, origin = (int(bit == 0), int(bit == 1), int(bit == 2))
        w = int(rng.integers(0, D + 1))
        u = int(rng.integers(0, D + 1))
        got = mlp(mlp.encode(s, m, pulse, safe, origin, w, u))
        want = reduced_transition(s, m, safe, u, weights)
        worst = max(worst, float((np.abs(got - want) / np.maximum(1.0, np.abs(want))).max()))
        cands = [s, weights.apply(s + m), s + m]
        dists = [float(np.abs(got - c).max()) for c in cands]
        best = min(range(3), key=dists.__getitem__)
        if dists[best] != dists[_branch(safe, u)]:
            mismatches += 1
    return MlpReport(samples, mismatches, worst, time.perf_counter() - t0)
