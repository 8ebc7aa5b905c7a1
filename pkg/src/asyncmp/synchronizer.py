"""Asynchronous simulation of sGIN with an alpha-synchronizer.

Three pieces live here:

* ``sync_transition``: the six-row update table, evaluated top-down exactly as
  printed (plus the origin-correction and leaf clamp switches).
* ``AlphaSynchronizer``: the node program ``simulate_sgin`` runs. It keeps the
  table's pulse/safe/origin vocabulary and counters but buffers pulses that
  belong to the next round, which the bare table cannot do. That buffering is
  what makes the result independent of message delays.
* ``build_exact_transition_mlp``: a 3-layer ReLU network that reproduces the
  reduced three-case transition (safe / u=0 / else) exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .engine import DelayModel, ORIGIN, RunConfig, run, HaltReason
from .errors import ContractViolation, InvalidArgument, OutOfDomain, ProtocolFailure, ProtocolViolation
from .graph import Graph
from .sync_baseline import SginModel, SginWeights

PULSE = "pulse"
SAFE = "safe"

CORRECTED = "corrected"
VERBATIM = "verbatim"


@dataclass(frozen=True)
class SyncState:
    s: np.ndarray
    w: int
    u: int
    l: int


@dataclass(frozen=True)
class SyncMessage:
    m: np.ndarray
    pulse: bool = False
    safe: bool = False
    origin: bool = False

    def bits(self) -> int:
        return int(self.pulse) + int(self.safe) + int(self.origin)


def initial_sync_state(x, L: int) -> SyncState:
    return SyncState(np.asarray(x, dtype=np.float64), 0, 0, L)


def sync_transition(state: SyncState, msg: SyncMessage, D: int, weights: SginWeights,
                    origin_mode: str = CORRECTED) -> tuple[SyncState, SyncMessage | None]:
    """Apply the first matching row of the update table.

    Rows: ``l=0`` (no-op), ``origin``, ``u=0``, ``safe``, ``w=0``, ``pulse``.
    Emitted messages carry the node's state from before the transition.
    In ``corrected`` mode the origin clears its own state so that the first
    round sums neighbours only. For ``D=1`` the ``u=0`` row clamps ``w`` at 0
    and closes the round on the same delivery.
    """
    if msg.bits() != 1:
        raise ContractViolation("sync message must set exactly one of pulse/safe/origin")
    if D < 1:
        raise InvalidArgument("degree must be >= 1")
    s, w, u, l = state.s, state.w, state.u, state.l
    if l == 0:
        return state, None
    if msg.origin:
        start = np.zeros_like(s) if origin_mode == CORRECTED else s
        return SyncState(start, D - 1, D, l), SyncMessage(s, pulse=True)
    if u == 0:
        if D == 1:
            return SyncState(weights.apply(msg.m), 0, D - 1, l - 1), SyncMessage(s, pulse=True)
        return SyncState(msg.m, D - 2, D, l), SyncMessage(s, pulse=True)
    if msg.safe:
        return SyncState(s, w, u - 1, l), None
    if w == 0:
        return SyncState(weights.apply(s + msg.m), 0, u - 1, l - 1), SyncMessage(s, safe=True)
    if msg.pulse:
        return SyncState(s + msg.m, w - 1, u, l), None
    raise ProtocolViolation(f"no row matches state (w={w}, u={u}, l={l}) and {msg}")


def reduced_transition(s, m, safe: int, u: int, weights: SginWeights) -> np.ndarray:
    """Three-case state update realised by the exact MLP."""
    if safe:
        return np.asarray(s, dtype=np.float64)
    if u == 0:
        return weights.apply(np.asarray(s) + np.asarray(m))
    return np.asarray(s, dtype=np.float64) + np.asarray(m, dtype=np.float64)


# --------------------------------------------------------------- simulation

READY, ROUND, WAIT, DONE = "ready", "round", "wait", "done"


@dataclass(frozen=True)
class AlphaState:
    """Synchronizer node state.

    ``s`` holds the layer state between rounds and the running neighbour sum
    during a round. ``w`` counts pulses still expected this round, ``u``
    counts neighbour safes still expected, ``l`` layers left. ``buf``/``nbuf``
    hold next-round pulses that overtook a late safe.
    """

    s: np.ndarray
    w: int
    u: int
    l: int
    phase: str = READY
    buf: np.ndarray | None = None
    nbuf: int = 0

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.s).all())


@dataclass
class AlphaSynchronizer:
    graph: Graph
    model: SginModel
    features: np.ndarray
    origin_mode: str = CORRECTED
    exclusive_bits: bool = False  # a round start and a round end may share one broadcast

    def __post_init__(self):
        self.payload_width = self.model.d
        self.origin_payload = np.zeros(self.model.d)

    def initial_state(self, node: int, graph: Graph) -> AlphaState:
        return AlphaState(np.array(self.features[node], dtype=np.float64), 0, 0, self.model.L)

    def on_message(self, node, st: AlphaState, msg):
        if st.phase == DONE:
            return st, None, False
        D = self.graph.degree(node)
        bits = msg.protocol_bits
        s, w, u, l, phase, buf, nbuf = st.s, st.w, st.u, st.l, st.phase, st.buf, st.nbuf
        pulse_payload = None
        emit_safe = False

        def start(acc, count):
            nonlocal s, w, u, phase, buf, nbuf, pulse_payload
            if pulse_payload is not None and D > 0:
                raise ProtocolViolation(f"node {node} would start two rounds on one delivery")
            pulse_payload = s
            s, w, u, phase = acc, D - count, D, ROUND
            buf, nbuf = None, 0

        if ORIGIN in bits:
            if phase != READY:
                raise ProtocolViolation(f"origin delivered to node {node} in phase {phase}")
            start(np.zeros_like(s) if self.origin_mode == CORRECTED else s.copy(), 0)
        if PULSE in bits:
            m = msg.payload
            if phase == READY:
                start(m.copy(), 1)
            elif phase == ROUND:
                s, w = s + m, w - 1
            else:
                buf, nbuf = (m.copy() if buf is None else buf + m), nbuf + 1
        if SAFE in bits:
            if phase == READY:
                raise ProtocolViolation(f"safe delivered to node {node} before it started")
            u -= 1
        if w < 0 or u < 0:
            raise ProtocolViolation(f"counter underflow at node {node}: w={w}, u={u}")
        while True:
            if phase == ROUND and w == 0:
                layer = self.model.layers[self.model.L - l]
                s, l = layer.apply(s), l - 1
                emit_safe = True
                phase = DONE if l == 0 else WAIT
            elif phase == WAIT and u == 0:
                start(np.zeros_like(s) if buf is None else buf, nbuf)
            else:
                break
        new = AlphaState(s, w, u, l, phase, buf, nbuf)
        if pulse_payload is not None:
            out_bits = frozenset((PULSE, SAFE)) if emit_safe else frozenset((PULSE,))
            return new, (pulse_payload, out_bits), False
        if emit_safe:
            return new, (st.s, frozenset((SAFE,))), False
        return new, None, False


@dataclass
class SimulationResult:
    outputs: np.ndarray
    run: object


def simulate_sgin(g: Graph, layers, L: int | None = None, start: int = 0,
                  delay: DelayModel | None = None, origin_mode: str = CORRECTED,
                  features: np.ndarray | None = None, record_trace: bool = False,
                  return_run: bool = False):
    """Run the synchronizer from ``start`` and return per-node vectors.

    ``layers`` is an ``SginModel`` or a sequence of ``SginWeights``. Nodes that
    the start cannot reach never simulate and keep their input features.
    """
    model = layers if isinstance(layers, SginModel) else SginModel(tuple(layers), layers[0].d)
    if L is not None and L != model.L:
        raise InvalidArgument(f"L={L} but {model.L} layers supplied")
    x = np.array(g.features if features is None else features, dtype=np.float64)
    if x.shape != (g.n, model.d):
        raise ContractViolation(f"features {x.shape} do not match (n={g.n}, d={model.d})")
    if model.L == 0:
        out = x.copy()
        return (out, None) if return_run else out
    cap = 20 * model.L * max(g.num_edges, 1)
    program = AlphaSynchronizer(g, model, x, origin_mode)
    cfg = RunConfig(start, cap, delay or DelayModel.constant(), record_trace)
    res = run(g, program, cfg)
    if res.halt_reason == HaltReason.BUDGET:
        raise ProtocolFailure(f"synchronizer not quiescent after {cap} deliveries")
    out = np.array([st.s for st in res.states])
    return (out, res) if return_run else out


# ---------------------------------------------------------------- exact MLP

@dataclass
class ExactTransitionMLP:
    """ReLU -> ReLU -> linear network over encoded ``(s, m, bits, w, u)``.

    Input layout: ``[s (d), m (d), pulse, safe, origin, w, u]``.
    """

    d: int
    bound: float
    count_max: int
    penalty: float
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    layer1_names: list = field(default_factory=list)

    def encode(self, s, m, pulse, safe, origin, w, u) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if s.shape != (self.d,) or m.shape != (self.d,):
            raise ContractViolation("state/message width mismatch")
        if np.abs(s).max(initial=0) > self.bound or np.abs(m).max(initial=0) > self.bound:
            raise OutOfDomain(f"state or message entry exceeds bound {self.bound}")
        for name, c in (("w", w), ("u", u)):
            if int(c) != c or not 0 <= c <= self.count_max:
                raise OutOfDomain(f"{name}={c} outside 0..{self.count_max}")
        for b in (pulse, safe, origin):
            if b not in (0, 1):
                raise OutOfDomain("protocol bits must be 0 or 1")
        return np.concatenate([s, m, [pulse, safe, origin, w, u]]).astype(np.float64)

    def hidden1(self, x):
        return np.maximum(self.W1 @ x + self.b1, 0.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h1 = self.hidden1(x)
        h2 = np.maximum(self.W2 @ h1 + self.b2, 0.0)
        return self.W3 @ h2 + self.b3


def build_exact_transition_mlp(D: int, d: int, weights: SginWeights,
                               bound: float = 100.0) -> ExactTransitionMLP:
    """Gate construction: each branch is silenced by a large negative weight
    from the bit (or bit complement) that disables it."""
    if weights.d != d:
        raise ContractViolation(f"weights width {weights.d} != d={d}")
    W, b = weights.W, weights.b
    pre_max = max(2 * bound, np.abs(W).sum(axis=1).max() * 2 * bound + np.abs(b).max(initial=0))
    P = 2.0 * pre_max + 1.0
    n_in = 2 * d + 5
    i_s, i_m = 0, d
    i_pulse, i_safe, i_origin, i_w, i_u = 2 * d, 2 * d + 1, 2 * d + 2, 2 * d + 3, 2 * d + 4

    rows, bias, names = [], [], []

    def unit(name, coeffs, c=0.0):
        r = np.zeros(n_in)
        for j, v in coeffs:
            r[j] += v
        rows.append(r)
        bias.append(c)
        names.append(name)
        return len(rows) - 1

    sp = [unit(f"s+{i}", [(i_s + i, 1.0)]) for i in range(d)]
    sn = [unit(f"s-{i}", [(i_s + i, -1.0)]) for i in range(d)]
    mp = [unit(f"m+{i}", [(i_m + i, 1.0)]) for i in range(d)]
    mn = [unit(f"m-{i}", [(i_m + i, -1.0)]) for i in range(d)]
    bit = {}
    for name, j in (("pulse", i_pulse), ("safe", i_safe), ("origin", i_origin)):
        bit[name] = unit(name, [(j, 1.0)])
        bit["not_" + name] = unit("not_" + name, [(j, -1.0)], 1.0)
    cnt = {}
    for name, j in (("w", i_w), ("u", i_u)):
        cnt[name + "_zero"] = unit(name + "=0", [(j, -1.0)], 1.0)
        cnt[name + "_r0"] = unit(f"relu({name})", [(j, 1.0)])
        cnt[name + "_r1"] = unit(f"relu({name}-1)", [(j, 1.0)], -1.0)
    W1, b1 = np.array(rows), np.array(bias)
    n1 = len(rows)

    # layer 2: five gated components of width d
    W2 = np.zeros((5 * d, n1))
    b2 = np.zeros(5 * d)
    for i in range(d):
        lp, ln_, mid, rp, rn = i, d + i, 2 * d + i, 3 * d + i, 4 * d + i
        # keep s when safe=1
        W2[lp, sp[i]] = 1.0
        W2[lp, bit["not_safe"]] = -P
        W2[ln_, sn[i]] = 1.0
        W2[ln_, bit["not_safe"]] = -P
        # sGIN update when safe=0 and u=0
        for j in range(d):
            W2[mid, sp[j]] += W[i, j]
            W2[mid, sn[j]] -= W[i, j]
            W2[mid, mp[j]] += W[i, j]
            W2[mid, mn[j]] -= W[i, j]
        b2[mid] = b[i]
        W2[mid, bit["safe"]] = -P
        W2[mid, cnt["u_r0"]] = -P  # relu(u) - relu(u-1) = [u > 0]
        W2[mid, cnt["u_r1"]] = P
        # accumulate s + m otherwise
        for sign, row in ((1.0, rp), (-1.0, rn)):
            W2[row, sp[i]] = sign
            W2[row, sn[i]] = -sign
            W2[row, mp[i]] = sign
            W2[row, mn[i]] = -sign
            W2[row, bit["safe"]] = -P
            W2[row, cnt["u_zero"]] = -P
    W3 = np.zeros((d, 5 * d))
    for i in range(d):
        W3[i, i], W3[i, d + i], W3[i, 2 * d + i], W3[i, 3 * d + i], W3[i, 4 * d + i] = 1, -1, 1, 1, -1
    return ExactTransitionMLP(d, bound, D + 1, P, W1, b1, W2, b2, W3, np.zeros(d), names)
