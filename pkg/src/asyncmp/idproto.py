"""Identifier assignment through delay races on a star.

The centre offers candidate IDs; every ID-less outer node answers each
attempt exactly once, with a ``claim`` if the offer reached it first or a
``surrender`` if a rival's claim beat the offer. An attempt with exactly one
claim hands out the ID, and the next offer confirms it implicitly. A second
claim in the same attempt makes the centre re-offer the same ID right away.

Counters follow the "last one arrives at zero" convention: ``w`` is the
number of replies still expected after the one being processed and ``x``
the number of ID-less outer nodes besides the current candidate.
"""

from __future__ import annotations

import enum
import statistics
from dataclasses import dataclass, replace

from .engine import DelayModel, ORIGIN, RunConfig, run, HaltReason
from .errors import InvalidArgument, ProtocolFailure, ProtocolViolation
from .graph import Graph, is_connected, star_graph

SAFETY_CAP = 10 ** 7


class Role(str, enum.Enum):
    ASSIGNING = "assigning"
    HAVING = "having"
    TAKING = "taking"
    YIELDING = "yielding"


class MsgType(str, enum.Enum):
    OFFER = "offer"
    CONFIRM = "confirm"
    CLAIM = "claim"
    SURRENDER = "surrender"
    ORIGIN = "origin"


@dataclass(frozen=True, slots=True)
class IdNodeState:
    try_: int = -1
    id: int = 0
    c: int = 0
    w: int = 0
    x: int = 0
    role: Role = Role.YIELDING


@dataclass(frozen=True, slots=True)
class IdMessage:
    cid: int
    attempt: int
    type: MsgType


INITIAL = IdNodeState()


def center_transition(state: IdNodeState, msg: IdMessage, D: int, first_cid: int = 1):
    if msg.type == MsgType.ORIGIN:
        if D < 1:
            raise InvalidArgument("centre needs at least one outer node")
        st = IdNodeState(0, 0, 0, D - 1, D - 1, Role.ASSIGNING)
        return st, IdMessage(first_cid, 0, MsgType.OFFER)
    if state.role != Role.ASSIGNING:
        if state.role == Role.HAVING:
            return state, None
        raise ProtocolViolation(f"centre transition in role {state.role}")
    if msg.type not in (MsgType.CLAIM, MsgType.SURRENDER):
        raise ProtocolViolation(f"centre cannot handle {msg.type}")
    if msg.attempt != state.try_:
        return state, None
    if msg.type == MsgType.CLAIM and state.c >= 1:
        st = replace(state, try_=state.try_ + 1, c=0, w=state.x)
        return st, IdMessage(msg.cid, st.try_, MsgType.OFFER)
    c = state.c + 1 if msg.type == MsgType.CLAIM else state.c
    if state.w > 0:
        return replace(state, c=c, w=state.w - 1), None
    # last reply of this attempt
    if c != 1:
        raise ProtocolViolation(f"attempt {state.try_} resolved with {c} claims")
    if state.x == 0:
        return IdNodeState(state.try_, 0, 0, 0, 0, Role.HAVING), IdMessage(msg.cid, state.try_, MsgType.CONFIRM)
    st = IdNodeState(state.try_ + 1, 0, 0, state.x - 1, state.x - 1, Role.ASSIGNING)
    return st, IdMessage(msg.cid + 1, st.try_, MsgType.OFFER)


def outer_transition(state: IdNodeState, msg: IdMessage):
    role = state.role
    if role == Role.HAVING:
        return state, None
    if role == Role.ASSIGNING:
        raise ProtocolViolation("outer transition called on the centre")
    t = msg.type
    if t == MsgType.CONFIRM:
        if role == Role.TAKING and msg.cid == state.id:
            return IdNodeState(state.try_, state.id, 0, 0, 0, Role.HAVING), None
        return state, None
    if t in (MsgType.SURRENDER, MsgType.ORIGIN) or msg.attempt <= state.try_:
        return state, None
    # a fresher attempt on a different ID means our claim won
    if role == Role.TAKING and msg.cid != state.id:
        return IdNodeState(state.try_, state.id, 0, 0, 0, Role.HAVING), None
    if t == MsgType.OFFER:
        return (IdNodeState(msg.attempt, msg.cid, 0, 0, 0, Role.TAKING),
                IdMessage(msg.cid, msg.attempt, MsgType.CLAIM))
    if t == MsgType.CLAIM:
        return (IdNodeState(msg.attempt, 0, 0, 0, 0, Role.YIELDING),
                IdMessage(msg.cid, msg.attempt, MsgType.SURRENDER))
    raise ProtocolViolation(f"no row matches {state} and {msg}")


class IdProgram:
    exclusive_bits = True
    check_finite_states = False
    origin_payload = IdMessage(0, 0, MsgType.ORIGIN)

    def __init__(self, graph: Graph, center: int = 0, first_cid: int = 1):
        self.graph = graph
        self.center = center
        self.first_cid = first_cid

    def initial_state(self, node, graph):
        return INITIAL

    def transition(self, node, state, msg: IdMessage):
        if msg.type == MsgType.ORIGIN or state.role == Role.ASSIGNING or node == self.center:
            return center_transition(state, msg, self.graph.degree(node), self.first_cid)
        return outer_transition(state, msg)

    def on_message(self, node, state, message):
        new, out = self.transition(node, state, message.payload)
        if out is None:
            return new, None, False
        return new, (out, frozenset((out.type.value,))), False


@dataclass
class StarOutcome:
    ids: dict[int, int]
    deliveries: int
    virtual_time: float
    attempts: int
    states: list


def _check_star(states, k) -> tuple[bool, bool]:
    ids = [st.id for st in states]
    complete = all(st.role == Role.HAVING for st in states)
    unique = len(set(ids)) == len(ids)
    return unique, complete


def run_star(k: int, seed: int, first_cid: int = 1, record_trace: bool = False):
    g = star_graph(k)
    cfg = RunConfig(0, SAFETY_CAP, DelayModel.uniform(0.0, 1.0, seed), record_trace)
    res = run(g, IdProgram(g, 0, first_cid), cfg)
    if res.halt_reason == HaltReason.BUDGET:
        raise ProtocolFailure(f"ID assignment on star k={k} not finished after {SAFETY_CAP} deliveries")
    return res


def assign_ids_star(k: int, seed: int = 0) -> StarOutcome:
    """IDs for a star with ``k`` outer nodes under uniform [0, 1] delays."""
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    res = run_star(k, seed)
    center = res.states[0]
    return StarOutcome({v: st.id for v, st in enumerate(res.states)}, res.deliveries,
                       res.final_time, center.try_ + 1, res.states)


def assign_ids_general(g: Graph, seed: int = 0, start: int = 0) -> dict[int, int]:
    """Repeated star assignments; the node holding the next-highest ID becomes
    the next centre and only its ID-less neighbours compete.

    Competition between outer nodes is run on the star-with-clique, i.e.
    rivals are treated as adjacent even when the host graph relays through
    the centre. Final IDs are rank-compressed to ``0..n-1``.
    """
    if not is_connected(g):
        raise InvalidArgument("ID assignment needs a connected graph")
    raw = {start: 0}
    top = 0
    frontier = [(0, start)]
    it = 0
    while frontier:
        frontier.sort()
        _, center = frontier.pop(0)
        outers = [v for v in g.adjacency[center] if v not in raw]
        if not outers:
            continue
        star_seed = seed if it == 0 else seed * 1_000_003 + it
        it += 1
        res = run_star(len(outers), star_seed, first_cid=top + 1)
        for i, v in enumerate(outers, start=1):
            st = res.states[i]
            if st.role != Role.HAVING:
                raise ProtocolFailure(f"node {v} left without an ID")
            raw[v] = st.id
            frontier.append((st.id, v))
        top = max(raw.values())
    ranks = {rid: r for r, rid in enumerate(sorted(raw.values()))}
    if len(ranks) != g.n:
        raise ProtocolFailure("duplicate identifiers assigned")
    return {v: ranks[rid] for v, rid in sorted(raw.items())}


class _FirstReplyWatch(IdProgram):
    """Stops the k=2 race as soon as outer node 2 answers attempt 0."""

    def on_message(self, node, state, message):
        new, emit, _ = super().on_message(node, state, message)
        if node == 2 and emit is not None and emit[0].attempt == 0:
            self.outcome = emit[0].type
            return new, emit, True
        return new, emit, False


def surrender_probability(trials: int, seed: int = 0) -> float:
    """Fraction of k=2 races in which node 2 surrenders to node 1's claim."""
    g = star_graph(2)
    hits = 0
    for t in range(trials):
        prog = _FirstReplyWatch(g)
        cfg = RunConfig(0, 64, DelayModel.uniform(0.0, 1.0, seed * 7_919_993 + t), False)
        run(g, prog, cfg)
        hits += prog.outcome == MsgType.SURRENDER
    return hits / trials


def protocol_report(k: int, trials: int, seed: int = 0, surrender_trials: int = 0) -> dict:
    """Monte Carlo summary for the CLI."""
    uniq_fail = comp_fail = 0
    deliveries, times, attempts = [], [], []
    for t in range(trials):
        res = run_star(k, seed * 1_000_033 + t)
        unique, complete = _check_star(res.states, k)
        uniq_fail += not unique
        comp_fail += not complete
        deliveries.append(res.deliveries)
        times.append(res.final_time)
        attempts.append(res.states[0].try_ + 1)
    report = {
        "k": k,
        "trials": trials,
        "uniqueness_failures": uniq_fail,
        "completeness_failures": comp_fail,
        "mean_deliveries": statistics.fmean(deliveries) if trials else None,
        "mean_virtual_time": statistics.fmean(times) if trials else None,
        "mean_attempts": statistics.fmean(attempts) if trials else None,
        "surrender_prob_estimate": None,
    }
    if surrender_trials:
        report["surrender_prob_estimate"] = surrender_probability(surrender_trials, seed)
        report["surrender_trials"] = surrender_trials
    return report
