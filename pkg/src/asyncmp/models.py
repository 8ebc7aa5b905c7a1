"""Trainable asynchronous node programs (AMP-RNN/GRU/LSTM with optional
ACT or Iter halting) plus readouts and the training loop.

A node starts in ``h0 = tanh(W_in x + b_in)``. Every delivered message is fed
to the recurrent cell as ``[payload, origin flags]``; the new state then
produces an outgoing message ``tanh(W_msg h + b_msg)`` unless the optional
send gate closes or the node has halted.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Tensor
from .engine import ORIGIN, DelayModel, RunConfig, run
from .errors import ContractViolation, InvalidArgument, NumericFailure
from .graph import DatasetInstance, Graph, TaskKind

log = logging.getLogger(__name__)

CELLS = ("rnn", "gru", "lstm")
HALTING = ("none", "act", "iter")
CONFIG_VERSION = 1


@dataclass(frozen=True)
class AmpCellConfig:
    state_width: int = 16
    message_width: int = 10
    cell: str = "rnn"
    skip_connection: bool = False
    halting: str = "none"
    epsilon: float = 0.01
    send_gate: bool = False

    def __post_init__(self):
        if self.cell not in CELLS:
            raise InvalidArgument(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.halting not in HALTING:
            raise InvalidArgument(f"halting must be one of {HALTING}, got {self.halting!r}")
        if not 0 < self.epsilon <= 0.5:
            raise InvalidArgument(f"epsilon must lie in (0, 0.5], got {self.epsilon}")
        if self.message_width < 1 or self.state_width < 1:
            raise InvalidArgument("widths must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AmpCellConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        unknown = set(data) - set(cls.__dataclass_fields__) - {"seed", "format_version", "name"}
        if unknown:
            raise InvalidArgument(f"unknown model config keys: {sorted(unknown)}")
        return cls(**known)


def load_model_config(path) -> tuple[AmpCellConfig, dict]:
    """Model config JSON -> (cell config, the remaining keys such as ``seed``)."""
    data = json.loads(Path(path).read_text())
    return AmpCellConfig.from_dict(data), {k: v for k, v in data.items()
                                           if k not in AmpCellConfig.__dataclass_fields__}


# ------------------------------------------------------------------ state

@dataclass(frozen=True)
class NodeState:
    h: Tensor
    c: Tensor | None = None       # LSTM memory cell
    acc: Tensor | None = None     # halting: weighted combination so far
    cum: Tensor | None = None     # ACT: sum of halting probs; Iter: product of continue probs
    halted: bool = False
    received: int = 0

    def is_finite(self) -> bool:
        return self.h.is_finite() and (self.acc is None or self.acc.is_finite())

    def to_jsonable(self):
        out = {"h": self.h.value.tolist(), "halted": self.halted, "received": self.received}
        if self.cum is not None:
            out["cum"] = float(self.cum.item())
        return out


def weighted_state(st: NodeState, halting: str) -> Tensor:
    """State used by the readout: the halting-weighted combination when halting is on."""
    if halting == "none":
        return st.h
    if halting == "act":
        return st.acc if st.halted else st.acc + (1.0 - st.cum) * st.h
    return st.acc + st.cum * st.h


def amp_step(st: NodeState, inp: Tensor, p: dict, cfg: AmpCellConfig):
    """One message delivery. Returns ``(state', outgoing message or None)``."""
    if st.halted:
        return st, None
    if cfg.cell == "lstm":
        h, c = ad.lstm_cell(st.h, st.c, inp, p, "cell.")
    elif cfg.cell == "gru":
        h, c = ad.gru_cell(st.h, inp, p, "cell."), None
    else:
        h, c = ad.rnn_cell(st.h, inp, p, "cell."), None
    if cfg.skip_connection:
        h = h + st.h
    acc, cum, halted = st.acc, st.cum, False
    if cfg.halting == "act":
        prob = ad.sigmoid(p["halt.W"] @ h + p["halt.b"])
        if cum.item() + prob.item() >= 1.0 - cfg.epsilon:
            rest = 1.0 - cum
            acc, cum, halted = acc + rest * h, cum + rest, True
        else:
            acc, cum = acc + prob * h, cum + prob
    elif cfg.halting == "iter":
        conf = ad.sigmoid(p["halt.W"] @ h + p["halt.b"])
        acc = acc + (conf * cum) * h
        cum = cum * (1.0 - conf)
        halted = cum.item() < cfg.epsilon
    new = NodeState(h, c, acc, cum, halted, st.received + 1)
    msg = ad.tanh(p["msg.W"] @ h + p["msg.b"])
    if cfg.send_gate:
        gate = ad.sigmoid(p["gate.W"] @ h + p["gate.b"])
        if gate.item() < 0.5:
            return new, None
        msg = msg * gate
    return new, msg


def readout_node(st_or_vec, p: dict, halting: str = "none", head: str = "out") -> Tensor:
    """Affine class logits for one node (or an already pooled vector)."""
    vec = weighted_state(st_or_vec, halting) if isinstance(st_or_vec, NodeState) else st_or_vec
    return p[f"{head}.W"] @ vec + p[f"{head}.b"]


def pool_runs(embeddings: list, p: dict, head: str = "out") -> Tensor:
    """Mean over per-run start-node embeddings, then the affine head."""
    if not embeddings:
        raise InvalidArgument("pool_runs needs at least one run")
    return readout_node(ad.mean(list(embeddings)), p, head=head)


# ---------------------------------------------------------------- program

class AmpProgram:
    """Engine adapter; all tensors go onto ``tape``."""

    check_finite_states = True

    def __init__(self, model: "AmpModel", params: dict, tape: Tape, graph: Graph):
        cfg = model.cfg
        if graph.d_in != model.d_in:
            raise ContractViolation(f"graph feature width {graph.d_in} != model input width {model.d_in}")
        self.cfg = cfg
        self.p = params
        self.tape = tape
        self.graph = graph
        self.payload_width = cfg.message_width
        self.n_origins = model.n_origins
        self._zero_flags = tape.constant(np.zeros(model.n_origins))
        self._zero_msg = tape.constant(np.zeros(cfg.message_width))

    def origin_payload_for(self, i: int) -> int:
        if i >= self.n_origins:
            raise InvalidArgument(f"model supports {self.n_origins} origins, run has more")
        return i

    def initial_state(self, node: int, graph: Graph) -> NodeState:
        t = self.tape
        p = self.p
        h = ad.tanh(p["in.W"] @ t.constant(graph.features[node]) + p["in.b"])
        H = self.cfg.state_width
        c = t.constant(np.zeros(H)) if self.cfg.cell == "lstm" else None
        if self.cfg.halting == "none":
            return NodeState(h, c)
        acc = t.constant(np.zeros(H))
        cum = t.constant(np.zeros(1) if self.cfg.halting == "act" else np.ones(1))
        return NodeState(h, c, acc, cum)

    def on_message(self, node, state: NodeState, message):
        if state.halted:
            return state, None, False
        if ORIGIN in message.protocol_bits:
            flags = np.zeros(self.n_origins)
            flags[message.payload] = 1.0
            inp = ad.concat([self._zero_msg, self.tape.constant(flags)])
        else:
            inp = ad.concat([message.payload, self._zero_flags])
        new, out = amp_step(state, inp, self.p, self.cfg)
        if out is None:
            return new, None, False
        return new, (out, frozenset(("msg",))), False


# ------------------------------------------------------------------ model

@dataclass
class AmpModel:
    cfg: AmpCellConfig
    store: ParameterStore
    d_in: int
    n_classes: int
    n_origins: int = 1
    heads: int = 1

    @classmethod
    def create(cls, cfg: AmpCellConfig, d_in: int, n_classes: int, seed: int,
               n_origins: int = 1, heads: int = 1) -> "AmpModel":
        rng = np.random.default_rng(seed)
        H, M = cfg.state_width, cfg.message_width
        st = ParameterStore()
        st.glorot("in.W", (H, d_in), rng)
        st.zeros("in.b", (H,))
        ad.init_cell(st, "cell.", cfg.cell, M + n_origins, H, rng)
        st.glorot("msg.W", (M, H), rng)
        st.zeros("msg.b", (M,))
        if cfg.send_gate:
            st.glorot("gate.W", (1, H), rng)
            # open by default so untrained models still propagate
            st.add("gate.b", np.ones(1))
        if cfg.halting != "none":
            st.glorot("halt.W", (1, H), rng)
            st.zeros("halt.b", (1,))
        st.glorot("out.W", (n_classes * heads, H), rng)
        st.zeros("out.b", (n_classes * heads,))
        return cls(cfg, st, d_in, n_classes, n_origins, heads)

    def meta(self) -> dict:
        return {"model": self.cfg.to_dict(), "d_in": self.d_in, "n_classes": self.n_classes,
                "n_origins": self.n_origins, "heads": self.heads}

    def save(self, path, extra: dict | None = None) -> None:
        self.store.save(path, {**self.meta(), **(extra or {})})

    @classmethod
    def load(cls, path) -> tuple["AmpModel", dict]:
        store, meta = ParameterStore.load(path)
        cfg = AmpCellConfig.from_dict(meta["model"])
        return cls(cfg, store, meta["d_in"], meta["n_classes"], meta.get("n_origins", 1),
                   meta.get("heads", 1)), meta


# --------------------------------------------------------- forward passes

@dataclass(frozen=True)
class RunSettings:
    budget_factor: int = 5
    halting_cap_factor: int = 50
    delay: DelayModel = field(default_factory=DelayModel)
    # a flat per-run message count, used for short graph-classification runs
    fixed_budget: int | None = None

    def budget(self, cfg: AmpCellConfig, n: int) -> int:
        if self.fixed_budget is not None:
            return self.fixed_budget
        return (self.halting_cap_factor if cfg.halting != "none" else self.budget_factor) * n


@dataclass
class InstanceOutput:
    loss: Tensor
    # (node, predicted class or tuple of per-head classes, true label) triples
    predictions: list
    deliveries: int


def _run(model, p, tape, g, start, settings, extra=(), record=False, delay_seed=None):
    delay = settings.delay
    if delay.kind == "uniform" and delay_seed is not None:
        delay = DelayModel.uniform(delay.lo, delay.hi, delay_seed)
    cfg = RunConfig(start, settings.budget(model.cfg, g.n), delay, record, tuple(extra))
    return run(g, AmpProgram(model, p, tape, g), cfg)


def forward_instance(model: AmpModel, p: dict, tape: Tape, inst: DatasetInstance,
                     settings: RunSettings, delay_seed: int | None = None,
                     runs_out: list | None = None) -> InstanceOutput:
    """Loss and predictions for one labelled graph.

    * graph task: one run per start node, pooled
    * node task without marks: one run per start node, each predicting its start
    * node task with marks / multi-start: a single run, every node predicted
    """
    g = inst.graph
    halting = model.cfg.halting
    C = model.n_classes
    losses, preds = [], []
    deliveries = 0

    def seed_for(s):
        return None if delay_seed is None else delay_seed * 100_003 + s

    if inst.task_kind == TaskKind.GRAPH:
        embs = []
        for s in range(g.n):
            res = _run(model, p, tape, g, s, settings, delay_seed=seed_for(s), record=runs_out is not None)
            deliveries += res.deliveries
            embs.append(weighted_state(res.states[s], halting))
            if runs_out is not None:
                runs_out.append(res)
        logits = pool_runs(embs, p)
        losses.append(ad.softmax_cross_entropy(logits, int(g.graph_label)))
        preds.append((None, int(np.argmax(logits.value)), int(g.graph_label)))
    elif inst.task_kind == TaskKind.NODE and inst.start_marks is None:
        for s in range(g.n):
            res = _run(model, p, tape, g, s, settings, delay_seed=seed_for(s), record=runs_out is not None)
            deliveries += res.deliveries
            logits = readout_node(res.states[s], p, halting)
            y = int(g.node_labels[s])
            losses.append(ad.softmax_cross_entropy(logits, y))
            preds.append((s, int(np.argmax(logits.value)), y))
            if runs_out is not None:
                runs_out.append(res)
    else:
        starts = inst.start_marks
        res = _run(model, p, tape, g, starts[0], settings, extra=starts[1:],
                   delay_seed=seed_for(starts[0]), record=runs_out is not None)
        deliveries += res.deliveries
        if runs_out is not None:
            runs_out.append(res)
        for v in range(g.n):
            logits = readout_node(res.states[v], p, halting)
            if inst.task_kind == TaskKind.MULTI_START_NODE:
                ys = tuple(int(y) for y in inst.multi_labels[v])
                guess = []
                for k, y in enumerate(ys):
                    part = _slice(logits, k * C, (k + 1) * C)
                    losses.append(ad.softmax_cross_entropy(part, y))
                    guess.append(int(np.argmax(part.value)))
                preds.append((v, tuple(guess), ys))
            else:
                y = int(g.node_labels[v])
                losses.append(ad.softmax_cross_entropy(logits, y))
                preds.append((v, int(np.argmax(logits.value)), y))
    return InstanceOutput(ad.mean(losses), preds, deliveries)


def _slice(t: Tensor, lo: int, hi: int) -> Tensor:
    """Differentiable slice of a vector, written as a selection matmul."""
    sel = np.zeros((hi - lo, t.value.size))
    sel[np.arange(hi - lo), np.arange(lo, hi)] = 1.0
    return ad.matmul(t.tape.constant(sel), t)


def predict(model: AmpModel, inst: DatasetInstance, settings: RunSettings,
            delay_seed: int | None = None) -> InstanceOutput:
    tape = Tape()
    return forward_instance(model, model.store.bind(tape, trainable=False), tape, inst, settings,
                            delay_seed)


def accuracy_of(preds: list) -> float:
    if not preds:
        return float("nan")
    return sum(p == y for _, p, y in preds) / len(preds)


# --------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    lr: float = 0.01
    clip: float = 1.0
    seed: int = 0
    settings: RunSettings = field(default_factory=RunSettings)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    accuracy: float
    grad_norm: float
    deliveries: int


def infer_classes(instances: list[DatasetInstance]) -> int:
    labels = set()
    for inst in instances:
        g = inst.graph
        if inst.task_kind == TaskKind.GRAPH:
            labels.add(int(g.graph_label))
        elif inst.multi_labels is not None:
            labels.update(int(x) for x in np.asarray(inst.multi_labels).reshape(-1))
        else:
            labels.update(int(x) for x in g.node_labels)
    if not labels or min(labels) < 0:
        raise InvalidArgument("labels must be non-negative integers")
    return max(2, max(labels) + 1)


def train(instances: list[DatasetInstance], model_cfg: AmpCellConfig, train_cfg: TrainConfig,
          model: AmpModel | None = None, n_classes: int | None = None,
          callback=None) -> tuple[AmpModel, list[TrainRecord]]:
    """Adam on per-graph cross-entropy; iteration ``i`` uses graph ``i mod len``."""
    if not instances:
        raise InvalidArgument("no training instances")
    if model is None:
        first = instances[0]
        n_origins = len(first.start_marks) if first.task_kind == TaskKind.MULTI_START_NODE else 1
        model = AmpModel.create(model_cfg, first.graph.d_in, n_classes or infer_classes(instances),
                                train_cfg.seed, n_origins=n_origins, heads=n_origins
                                if first.task_kind == TaskKind.MULTI_START_NODE else 1)
    store = model.store
    history = []
    for it in range(train_cfg.iterations):
        inst = instances[it % len(instances)]
        tape = Tape()
        p = store.bind(tape)
        out = forward_instance(model, p, tape, inst, train_cfg.settings,
                               delay_seed=train_cfg.seed * 1_000_003 + it)
        loss = out.loss.item()
        if not math.isfinite(loss):
            raise NumericFailure(f"non-finite loss at iteration {it}", it)
        tape.backward(out.loss)
        store.accumulate(p)
        norm = store.clip_grad_norm(train_cfg.clip)
        ad.adam_step(store, train_cfg.lr)
        rec = TrainRecord(it, loss, accuracy_of(out.predictions), norm, out.deliveries)
        history.append(rec)
        if callback is not None:
            callback(rec)
    return model, history
