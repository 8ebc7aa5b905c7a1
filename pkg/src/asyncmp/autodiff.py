"""Small reverse-mode autodiff over numpy vectors and matrices.

Every primitive appends one backward closure to the tape it was called on;
``Tape.backward`` runs them once, newest first.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ContractViolation, InvalidArgument, NumericFailure

CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("value", "grad", "tape", "requires_grad")

    def __init__(self, value, tape=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def width(self):
        return self.value.size

    def is_finite(self):
        return bool(np.isfinite(self.value).all())

    def item(self):
        return float(self.value.reshape(-1)[0])

    def to_jsonable(self):
        return self.value.tolist()

    def __repr__(self):
        return f"Tensor({self.value!r})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: scale(a, -1.0)


class Tape:
    def __init__(self):
        self.records = []
        self.consumed = False

    def __len__(self):
        return len(self.records)

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self, False)

    def variable(self, value) -> Tensor:
        return Tensor(np.array(value, dtype=np.float64), self, True)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractViolation("tape already consumed by a backward pass")
        if loss.value.size != 1:
            raise ContractViolation("backward needs a scalar loss")
        if not np.isfinite(loss.value).all():
            raise NumericFailure("non-finite loss")
        self.consumed = True
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self.records):
            fn()
        self.records = []


def _lift(x, tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), tape, False)


def _tape_of(*ts):
    for t in ts:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    return None


def _acc(t: Tensor, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if np.prod(shape) == 1 else g


def _check_bshape(a, b, op):
    if a.shape != b.shape and a.value.size != 1 and b.value.size != 1:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} differ")


def _make(value, parents, backward, tape):
    need = any(p.requires_grad for p in parents)
    out = Tensor(value, tape, need)
    if need:
        if tape is None:
            raise ContractViolation("differentiable op without a tape")
        tape.records.append(lambda: out.grad is not None and backward(out.grad))
    return out


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_bshape(a, b, "add")

    def back(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))
    return _make(a.value + b.value, (a, b), back, tape)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_bshape(a, b, "sub")

    def back(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))
    return _make(a.value - b.value, (a, b), back, tape)


def mul(a, b) -> Tensor:
    """Hadamard product; a size-1 operand broadcasts."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_bshape(a, b, "mul")
    av, bv = a.value, b.value

    def back(g):
        _acc(a, _unbroadcast(g * bv, a.shape))
        _acc(b, _unbroadcast(g * av, b.shape))
    return _make(av * bv, (a, b), back, tape)


hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.value * c, (a,), lambda g: _acc(a, g * c), a.tape)


def matmul(W, x) -> Tensor:
    tape = _tape_of(W, x)
    W, x = _lift(W, tape), _lift(x, tape)
    if W.value.ndim != 2 or x.value.ndim not in (1, 2) or W.shape[1] != x.shape[0]:
        raise ContractViolation(f"matmul: shapes {W.shape} and {x.shape} incompatible")
    Wv, xv = W.value, x.value

    def back(g):
        if W.requires_grad:
            _acc(W, np.outer(g, xv) if xv.ndim == 1 else g @ xv.T)
        if x.requires_grad:
            _acc(x, Wv.T @ g)
    return _make(Wv @ xv, (W, x), back, tape)


def concat(parts) -> Tensor:
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    if any(p.value.ndim != 1 for p in parts):
        raise ContractViolation("concat expects vectors")
    sizes = np.cumsum([0] + [p.value.size for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, sizes[:-1], sizes[1:]):
            _acc(p, g[lo:hi])
    return _make(np.concatenate([p.value for p in parts]), parts, back, tape)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: _acc(a, g * mask), a.tape)


def sigmoid(a: Tensor) -> Tensor:
    v = a.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _make(out, (a,), lambda g: _acc(a, g * out * (1.0 - out)), a.tape)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: _acc(a, g * (1.0 - out * out)), a.tape)


def row_sum(a: Tensor) -> Tensor:
    """Sum along the last axis; a vector becomes a length-1 vector."""
    v = a.value
    if v.ndim == 1:
        return _make(np.array([v.sum()]), (a,), lambda g: _acc(a, np.full(v.shape, g[0])), a.tape)
    return _make(v.sum(axis=1), (a,), lambda g: _acc(a, np.repeat(g[:, None], v.shape[1], axis=1)),
                 a.tape)


def mean(parts) -> Tensor:
    if not parts:
        raise InvalidArgument("mean of no tensors")
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    shape = parts[0].shape
    if any(p.shape != shape for p in parts):
        raise ContractViolation("mean: shapes differ")
    k = len(parts)
    total = parts[0].value.copy()
    for p in parts[1:]:
        total = total + p.value

    def back(g):
        for p in parts:
            _acc(p, g / k)
    return _make(total / k, parts, back, tape)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    v = logits.value
    if v.ndim != 1 or not 0 <= label < v.size:
        raise ContractViolation(f"label {label} invalid for logits of shape {v.shape}")
    z = v - v.max()
    p = np.exp(z)
    p /= p.sum()
    loss = math.log(np.exp(z).sum()) - z[label]

    def back(g):
        d = p.copy()
        d[label] -= 1.0
        _acc(logits, g * d)
    return _make(np.array(loss), (logits,), back, logits.tape)


def softmax(v: np.ndarray) -> np.ndarray:
    z = np.exp(v - v.max())
    return z / z.sum()


# ------------------------------------------------------------- parameters

class ParameterStore:
    """Named float64 parameters with gradient and Adam moment buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value) -> np.ndarray:
        if name in self.params:
            raise InvalidArgument(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def glorot(self, name, shape, rng: np.random.Generator):
        a = math.sqrt(6.0 / (shape[0] + shape[1]))
        return self.add(name, rng.uniform(-a, a, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Tensor]:
        """Fresh leaf tensors sharing the parameter arrays (read-only snapshot)."""
        return {k: Tensor(v, tape, trainable) for k, v in self.params.items()}

    def accumulate(self, bound: dict[str, Tensor]) -> None:
        for k, t in bound.items():
            if t.grad is not None:
                self.grads[k] += t.grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((g * g).sum()) for g in self.grads.values()))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm > 0:
            f = max_norm / norm
            for g in self.grads.values():
                g *= f
        return norm

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, v in self.params.items():
            out.add(k, v.copy())
        return out

    def to_dict(self) -> dict:
        return {"format_version": CHECKPOINT_VERSION,
                "params": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                           for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterStore":
        if data.get("format_version") != CHECKPOINT_VERSION:
            raise InvalidArgument(f"unsupported checkpoint version {data.get('format_version')}")
        store = cls()
        for k, spec in data["params"].items():
            store.add(k, np.array(spec["values"], dtype=np.float64).reshape(spec["shape"]))
        return store

    def save(self, path, extra: dict | None = None) -> None:
        data = self.to_dict()
        if extra:
            data.update(extra)
        Path(path).write_text(json.dumps(data))

    @classmethod
    def load(cls, path) -> tuple["ParameterStore", dict]:
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data), {k: v for k, v in data.items() if k not in ("params",)}


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; gradients are zeroed afterwards."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in store.params.items():
        g = store.grads[k]
        m = store.m[k]
        v = store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g.fill(0.0)


# ------------------------------------------------------------------ cells

def init_cell(store: ParameterStore, prefix: str, kind: str, in_width: int, hidden: int,
              rng: np.random.Generator) -> None:
    gates = {"rnn": ["h"], "gru": ["z", "r", "n"], "lstm": ["i", "f", "o", "g"]}
    if kind not in gates:
        raise InvalidArgument(f"unknown cell kind {kind!r}")
    for gname in gates[kind]:
        store.glorot(f"{prefix}W{gname}", (hidden, in_width), rng)
        store.glorot(f"{prefix}U{gname}", (hidden, hidden), rng)
        store.zeros(f"{prefix}b{gname}", (hidden,))


def _check_cell(h, x, p, prefix, gate):
    W, U = p[f"{prefix}W{gate}"], p[f"{prefix}U{gate}"]
    if W.shape[1] != x.value.size or U.shape[1] != h.value.size or W.shape[0] != h.value.size:
        raise ContractViolation(f"cell widths: h={h.shape}, x={x.shape}, W={W.shape}, U={U.shape}")


def _gate(h, x, p, prefix, g):
    return p[f"{prefix}W{g}"] @ x + p[f"{prefix}U{g}"] @ h + p[f"{prefix}b{g}"]


def rnn_cell(h: Tensor, x: Tensor, p, prefix: str = "") -> Tensor:
    _check_cell(h, x, p, prefix, "h")
    return tanh(_gate(h, x, p, prefix, "h"))


def gru_cell(h: Tensor, x: Tensor, p, prefix: str = "") -> Tensor:
    """h' = (1 - z) * n + z * h with n = tanh(W_n x + U_n (r * h) + b_n)."""
    _check_cell(h, x, p, prefix, "z")
    z = sigmoid(_gate(h, x, p, prefix, "z"))
    r = sigmoid(_gate(h, x, p, prefix, "r"))
    n = tanh(p[f"{prefix}Wn"] @ x + p[f"{prefix}Un"] @ (r * h) + p[f"{prefix}bn"])
    return n - z * n + z * h


def lstm_cell(h: Tensor, c: Tensor, x: Tensor, p, prefix: str = "") -> tuple[Tensor, Tensor]:
    _check_cell(h, x, p, prefix, "i")
    i = sigmoid(_gate(h, x, p, prefix, "i"))
    f = sigmoid(_gate(h, x, p, prefix, "f"))
    o = sigmoid(_gate(h, x, p, prefix, "o"))
    g = tanh(_gate(h, x, p, prefix, "g"))
    c2 = f * c + i * g
    return o * tanh(c2), c2


def check_gradients(loss_fn, store: ParameterStore, h: float = 1e-5) -> dict[str, float]:
    """Relative error between tape gradients and central differences, per parameter.

    ``loss_fn(params, tape)`` must build a scalar loss from the bound tensors.
    The error is ``|g_tape - g_fd| / max(|g_tape| + |g_fd|, 1e-12)`` over the
    whole parameter array.
    """
    tape = Tape()
    bound = store.bind(tape)
    tape.backward(loss_fn(bound, tape))
    out = {}
    for name, value in store.params.items():
        analytic = bound[name].grad
        analytic = np.zeros_like(value) if analytic is None else analytic
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            t1 = Tape()
            up = loss_fn(store.bind(t1, False), t1).item()
            flat[i] = old - h
            t2 = Tape()
            down = loss_fn(store.bind(t2, False), t2).item()
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        denom = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), 1e-12)
        out[name] = float(np.linalg.norm(analytic - numeric)) / denom
    return out
