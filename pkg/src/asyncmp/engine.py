"""Deterministic discrete-event executor for asynchronous node programs.

A run injects one origin message at the start node. Every handled message
may make the receiver broadcast one payload; each neighbour gets its own
copy with its own delay. Deliveries happen one at a time in ascending
``(arrival_time, sender, seq)`` order, which is a strict total order.
"""

from __future__ import annotations

import dataclasses
import enum
import heapq
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol

import numpy as np

from .errors import ContractViolation, InvalidArgument, NumericFailure
from .graph import Graph

ORIGIN = "origin"
NO_SENDER = -1


@dataclass(frozen=True, slots=True)
class Message:
    payload: Any
    sender: int | None
    protocol_bits: frozenset
    send_time: float
    seq: int


@dataclass(frozen=True)
class DelayModel:
    kind: str = "constant"
    value: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind == "constant":
            if not self.value > 0:
                raise InvalidArgument("constant delay must be > 0")
        elif self.kind == "uniform":
            if not (self.lo >= 0 and self.hi > self.lo):
                raise InvalidArgument("uniform delay needs 0 <= lo < hi")
        else:
            raise InvalidArgument(f"unknown delay kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float = 1.0) -> "DelayModel":
        return cls("constant", value=value)

    @classmethod
    def uniform(cls, lo: float = 0.0, hi: float = 1.0, seed: int = 0) -> "DelayModel":
        return cls("uniform", lo=lo, hi=hi, seed=seed)

    def sampler(self):
        """Fresh draw function; every run gets its own stream."""
        if self.kind == "constant":
            v = float(self.value)
            return lambda: v
        rng = random.Random(self.seed)
        lo, span = float(self.lo), float(self.hi - self.lo)
        return lambda: lo + span * rng.random()


@dataclass(frozen=True)
class RunConfig:
    start_node: int = 0
    message_budget: int | None = None  # None = unlimited; counts handled deliveries
    delay: DelayModel = field(default_factory=DelayModel)
    record_trace: bool = True
    # further nodes that also receive an origin message at time 0
    extra_starts: tuple = ()

    def with_start(self, start: int) -> "RunConfig":
        return dataclasses.replace(self, start_node=start)


class NodeProgram(Protocol):
    """Per-node state machine run by the engine.

    ``on_message`` returns ``(new_state, emission, halt)`` where ``emission`` is
    ``None`` or a ``(payload, protocol_bits)`` pair broadcast to all neighbours,
    and ``halt`` asks the engine to stop the whole run.
    """

    def initial_state(self, node: int, graph: Graph) -> Any: ...

    def on_message(self, node: int, state: Any, message: Message) -> tuple[Any, Any, bool]: ...


@dataclass(frozen=True, slots=True)
class TraceStep:
    arrival_time: float
    receiver: int
    message: Message
    state_before: Any
    state_after: Any
    emitted_payload: Any


@dataclass
class Trace:
    steps: list[TraceStep] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def to_records(self) -> list[dict]:
        return [step_record(s) for s in self.steps]

    def dumps(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records())

    def write_jsonl(self, path) -> None:
        Path(path).write_text(self.dumps())


class HaltReason(str, enum.Enum):
    QUIESCENT = "quiescent"
    BUDGET = "budget"
    PROGRAM = "program"


@dataclass
class RunResult:
    start_node: int
    states: list
    trace: Trace
    halt_reason: HaltReason
    deliveries: int
    final_time: float


def _width(payload) -> int | None:
    if isinstance(payload, np.ndarray):
        return payload.size
    w = getattr(payload, "width", None)
    return w if isinstance(w, int) else None


def _finite(obj) -> bool:
    if isinstance(obj, np.ndarray):
        return bool(np.isfinite(obj).all())
    check = getattr(obj, "is_finite", None)
    return True if check is None else bool(check())


def run(g: Graph, program: NodeProgram, cfg: RunConfig) -> RunResult:
    """Execute ``program`` on ``g`` from ``cfg.start_node`` until quiescence,
    budget exhaustion or a program-requested halt."""
    if not 0 <= cfg.start_node < g.n:
        raise InvalidArgument(f"start node {cfg.start_node} out of range for n={g.n}")
    budget = math.inf if cfg.message_budget is None else cfg.message_budget
    if budget <= 0:
        raise InvalidArgument("message budget must be positive")
    draw = cfg.delay.sampler()
    exclusive = getattr(program, "exclusive_bits", False)
    expected_width = getattr(program, "payload_width", None)
    check_states = getattr(program, "check_finite_states", True)
    adjacency = g.adjacency
    states = [program.initial_state(v, g) for v in range(g.n)]
    trace = Trace()
    steps = trace.steps
    record = cfg.record_trace

    payload_for = getattr(program, "origin_payload_for", None)
    heap = []
    for i, node in enumerate((cfg.start_node, *cfg.extra_starts)):
        if not 0 <= node < g.n:
            raise InvalidArgument(f"start node {node} out of range for n={g.n}")
        origin = payload_for(i) if payload_for else getattr(program, "origin_payload", None)
        heap.append((0.0, NO_SENDER, i, node, Message(origin, None, frozenset((ORIGIN,)), 0.0, i)))
    seq = len(heap)
    delivered = 0
    now = 0.0
    reason = HaltReason.QUIESCENT
    push, pop = heapq.heappush, heapq.heappop
    while heap:
        if delivered >= budget:
            reason = HaltReason.BUDGET
            break
        now, _, _, recv, msg = pop(heap)
        before = states[recv]
        after, emit, halt = program.on_message(recv, before, msg)
        states[recv] = after
        if check_states and not _finite(after):
            raise NumericFailure(f"non-finite state at node {recv}", delivered)
        payload = None
        if emit is not None:
            payload, bits = emit
            if exclusive and len(bits) != 1:
                raise ContractViolation(f"message must set exactly one bit, got {sorted(bits)}")
            width = _width(payload)
            if expected_width is None:
                expected_width = width
            elif width is not None and width != expected_width:
                raise ContractViolation(f"payload width {width} != {expected_width}")
            if not _finite(payload):
                raise NumericFailure(f"non-finite payload from node {recv}", delivered)
            for nb in adjacency[recv]:
                push(heap, (now + draw(), recv, seq, nb, Message(payload, recv, bits, now, seq)))
                seq += 1
        if record:
            steps.append(TraceStep(now, recv, msg, before, after, payload))
        delivered += 1
        if halt:
            reason = HaltReason.PROGRAM
            break
    return RunResult(cfg.start_node, states, trace, reason, delivered, now)


def run_all_starts(g: Graph, program: NodeProgram, cfg_template: RunConfig) -> list[RunResult]:
    """One independent run per node, each with that node as the start."""
    return [run(g, program, cfg_template.with_start(s)) for s in range(g.n)]


# ------------------------------------------------------------ serialisation

def to_jsonable(obj):
    if obj is None or isinstance(obj, (bool, int, str)):
        return obj
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else repr(obj)
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer, np.floating)):
        return to_jsonable(obj.item())
    if isinstance(obj, (frozenset, set)):
        return sorted(to_jsonable(x) for x in obj)
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if hasattr(obj, "to_jsonable"):
        return obj.to_jsonable()
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    return repr(obj)


def step_record(step: TraceStep) -> dict:
    m = step.message
    return {
        "arrival_time": step.arrival_time,
        "receiver": step.receiver,
        "message": {
            "payload": to_jsonable(m.payload),
            "sender": m.sender,
            "protocol_bits": to_jsonable(m.protocol_bits),
            "send_time": m.send_time,
            "seq": m.seq,
        },
        "state_before": to_jsonable(step.state_before),
        "state_after": to_jsonable(step.state_after),
        "emitted_payload": to_jsonable(step.emitted_payload),
    }


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def format_record(i: int, rec: dict) -> str:
    m = rec["message"]
    sender = "init" if m["sender"] is None else f"n{m['sender']}"
    bits = ",".join(m["protocol_bits"]) or "-"
    out = "-" if rec["emitted_payload"] is None else "broadcast"
    return (f"#{i:<5d} t={rec['arrival_time']:<10.4g} {sender:>6s} -> n{rec['receiver']:<4d}"
            f" [{bits}] {out}")
