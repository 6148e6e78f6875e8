"""Define-by-run reverse-mode differentiation on numpy arrays.

A :class:`Tape` records every primitive as it executes. Each recorded
:class:`Var` keeps its value, its parents and a closure that maps the output
gradient to parent gradients. ``tape.backward(loss)`` walks the record in
reverse creation order (a valid reverse topological order) and deposits
parameter gradients into the owning :class:`ParameterStore`.

All arrays are float64. Operations accept arbitrary leading (batch) axes;
``linear`` and the softmax family act on the last axis.
"""
from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as rng_mod

FLOAT = np.float64


class NumericalError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class Var:
    __slots__ = ("value", "tape", "index", "parents", "backward_fn", "param_name", "store")

    def __init__(self, value, tape, parents=(), backward_fn=None, param_name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.param_name = param_name
        self.store = None
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, param={self.param_name})"

    def _coerce(self, other):
        return other if isinstance(other, Var) else self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._coerce(other)))

    def __rsub__(self, other):
        return add(self._coerce(other), neg(self))

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Ordered record of executed primitives.

    With ``record=False`` operations still compute values but nothing is
    kept, which is what evaluation and finite-difference probes use.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, parents, backward_fn) -> Var:
        if not self.record:
            return Var(value, self)
        v = Var(value, self, parents, backward_fn)
        v.index = len(self.nodes)
        self.nodes.append(v)
        return v

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=FLOAT), self)

    def param(self, store: "ParameterStore", name: str) -> Var:
        v = Var(store.values[name], self, param_name=name)
        if self.record:
            v.index = len(self.nodes)
            self.nodes.append(v)
            v.store = store
        return v

    def backward(self, output: Var) -> None:
        """Accumulate d(output)/d(parameter) into the parameter store grads."""
        if not self.record:
            raise ValueError("tape was created with record=False")
        if output.tape is not self or output.index < 0 or self.nodes[output.index] is not output:
            raise ValueError("output was not produced on this tape")
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
        grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.param_name is not None:
                node.store.grads[node.param_name] += g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or parent.index < 0:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a: Var, b: Var) -> Var:
    sa, sb = a.value.shape, b.value.shape
    return a.tape._push(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return a.tape._push(-a.value, (a,), lambda g: (-g,))


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape._push(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def scale(a: Var, c: float) -> Var:
    return a.tape._push(a.value * c, (a,), lambda g: (g * c,))


def square(a: Var) -> Var:
    av = a.value
    return a.tape._push(av * av, (a,), lambda g: (2.0 * g * av,))


def linear(tape: Tape, W: Var, b: Var | None, x: Var) -> Var:
    """y = W x + b over the last axis of ``x``; W has shape (out, in)."""
    Wv, xv = W.value, x.value
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[1]:
        raise ValueError(f"linear: W {Wv.shape} incompatible with x {xv.shape}")
    if b is not None and b.value.shape != (Wv.shape[0],):
        raise ValueError(f"linear: bias {b.value.shape} does not match W {Wv.shape}")
    y = xv @ Wv.T
    if b is not None:
        y = y + b.value

    def backward(g):
        g2 = g.reshape(-1, Wv.shape[0])
        x2 = xv.reshape(-1, Wv.shape[1])
        gW = g2.T @ x2
        gx = g @ Wv
        if b is None:
            return gW, None, gx
        return gW, g2.sum(axis=0), gx

    parents = (W, b if b is not None else tape.constant(0.0), x)
    return tape._push(y, parents, backward)


def relu(tape: Tape, x: Var) -> Var:
    mask = x.value > 0
    return tape._push(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(tape: Tape, x: Var) -> Var:
    s = _sigmoid(x.value)
    return tape._push(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(tape: Tape, x: Var) -> Var:
    t = np.tanh(x.value)
    return tape._push(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(tape: Tape, x: Var) -> Var:
    e = np.exp(x.value)
    return tape._push(e, (x,), lambda g: (g * e,))


def softplus(tape: Tape, x: Var) -> Var:
    xv = x.value
    return tape._push(np.logaddexp(0.0, xv), (x,), lambda g: (g * _sigmoid(xv),))


def clip(tape: Tape, x: Var, lo: float, hi: float) -> Var:
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return tape._push(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


def softmax(tape: Tape, x: Var) -> Var:
    p = _softmax(x.value)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return tape._push(p, (x,), backward)


def log_softmax(tape: Tape, x: Var) -> Var:
    xv = x.value
    shifted = xv - xv.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return tape._push(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def log1mexp(tape: Tape, x: Var) -> Var:
    """log(1 - exp(-x)) for x > 0, accurate for both tiny and large x."""
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(xv < math.log(2.0), np.log(-np.expm1(-xv)), np.log1p(-np.exp(-xv)))
    return tape._push(out, (x,), lambda g: (g / np.expm1(xv),))


def concat(tape: Tape, xs: Sequence[Var], axis: int = -1) -> Var:
    values = [x.value for x in xs]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._push(out, tuple(xs), backward)


def stack(tape: Tape, xs: Sequence[Var], axis: int = 0) -> Var:
    out = np.stack([x.value for x in xs], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return tape._push(out, tuple(xs), backward)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, slice)) for p in parts)


def take(x: Var, idx) -> Var:
    shape = x.value.shape
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return x.tape._push(x.value[idx], (x,), backward)


def pick(tape: Tape, x: Var, index) -> Var:
    """Select ``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    xv = x.value
    out = np.take_along_axis(xv, index[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(xv)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return tape._push(out, (x,), backward)


def reshape(tape: Tape, x: Var, shape) -> Var:
    old = x.value.shape
    return tape._push(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_(tape: Tape, x: Var, axis=None) -> Var:
    shape = x.value.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return tape._push(np.asarray(x.value.sum(axis=axis)), (x,), backward)


def one_hot(tape: Tape, index, num_classes: int) -> Var:
    index = np.asarray(index, dtype=np.int64)
    if np.any(index < 0) or np.any(index >= num_classes):
        raise ValueError(f"category index out of range for {num_classes} classes")
    return tape.constant(np.eye(num_classes)[index])


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- recurrent cell


@dataclass
class RecurrentState:
    h: Var
    c: Var


@dataclass
class LSTMWeights:
    W: Var  # (4H, in + H), gate blocks ordered input, forget, candidate, output
    b: Var  # (4H,)


def lstm_zero_state(tape: Tape, hidden: int, batch_shape=()) -> RecurrentState:
    z = np.zeros((*batch_shape, hidden))
    return RecurrentState(tape.constant(z), tape.constant(z.copy()))


def lstm_step(tape: Tape, weights: LSTMWeights, state: RecurrentState, x: Var) -> RecurrentState:
    """One LSTM step, recorded as a single fused node with a hand-written backward."""
    Wv, bv = weights.W.value, weights.b.value
    hv, cv, xv = state.h.value, state.c.value, x.value
    H = hv.shape[-1]
    if Wv.shape != (4 * H, xv.shape[-1] + H) or bv.shape != (4 * H,) or cv.shape != hv.shape:
        raise ValueError(f"lstm_step: weights {Wv.shape} do not fit x {xv.shape}, h {hv.shape}")
    xh = np.concatenate([xv, hv], axis=-1)
    a = xh @ Wv.T + bv
    i = _sigmoid(a[..., :H])
    f = _sigmoid(a[..., H : 2 * H])
    gc = np.tanh(a[..., 2 * H : 3 * H])
    o = _sigmoid(a[..., 3 * H :])
    c_new = f * cv + i * gc
    tc = np.tanh(c_new)
    h_new = o * tc
    n_in = xv.shape[-1]

    def backward(g):
        dh, dc = g[..., :H], g[..., H:]
        dc = dc + dh * o * (1.0 - tc * tc)
        da = np.concatenate(
            [dc * gc * i * (1.0 - i), dc * cv * f * (1.0 - f), dc * i * (1.0 - gc * gc), dh * tc * o * (1.0 - o)],
            axis=-1,
        )
        dW = da.reshape(-1, 4 * H).T @ xh.reshape(-1, n_in + H)
        db = da.reshape(-1, 4 * H).sum(axis=0)
        dxh = da @ Wv
        return dW, db, dxh[..., n_in:], dc * f, dxh[..., :n_in]

    hc = tape._push(
        np.concatenate([h_new, c_new], axis=-1),
        (weights.W, weights.b, state.h, state.c, x),
        backward,
    )
    return RecurrentState(take(hc, (Ellipsis, slice(0, H))), take(hc, (Ellipsis, slice(H, 2 * H))))


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Named float64 arrays with gradient slots and Adam moments."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.array(value, dtype=FLOAT)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.t[name] = 0
        return value

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name) -> np.ndarray:
        return self.values[name]

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.values.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.values[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {self.values[k].shape} vs {np.shape(v)}")
            self.values[k][...] = v

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))


def init_uniform(store: ParameterStore, name: str, shape, fan_in: int, g: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    store.add(name, g.uniform(-bound, bound, size=shape))


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = store.grad_norm()
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in store.grads.values():
            g *= factor
    return norm


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    for name, p in store.values.items():
        g = store.grads[name]
        t = store.t[name] + 1
        store.t[name] = t
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def numeric_gradient(loss_fn, store: ParameterStore, name: str, epsilon: float) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to every entry of one array."""
    flat = store.values[name].reshape(-1)
    out = np.empty(flat.size)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + epsilon
        up = float(loss_fn(Tape(record=False), store).value)
        flat[j] = orig - epsilon
        down = float(loss_fn(Tape(record=False), store).value)
        flat[j] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericalError(f"non-finite loss while perturbing {name}[{j}]")
        out[j] = (up - down) / (2.0 * epsilon)
    return out.reshape(store.values[name].shape)


def finite_diff_check(
    loss_fn: Callable[[Tape, ParameterStore], Var],
    store: ParameterStore,
    epsilon: float = 1e-5,
    names: Sequence[str] | None = None,
    per_entry: bool = False,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``loss_fn(tape, store)`` must be deterministic and return a scalar Var.
    For each named parameter the error is
    ``|ga - gn| / max(|ga|, |gn|, 1e-12)`` with ``|.|`` the L2 norm over the
    array; ``per_entry=True`` applies the same formula to every scalar entry
    instead, which is dominated by roundoff for entries below ~1e-6.
    """
    store.zero_grad()
    tape = Tape()
    loss = loss_fn(tape, store)
    if not np.all(np.isfinite(loss.value)):
        raise NumericalError("loss is not finite")
    tape.backward(loss)
    analytic = {k: g.copy() for k, g in store.grads.items()}
    store.zero_grad()
    worst = 0.0
    for name in names if names is not None else store.names():
        ga = analytic[name]
        gn = numeric_gradient(loss_fn, store, name, epsilon)
        if per_entry:
            err = np.abs(ga - gn) / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-12)
            worst = max(worst, float(err.max(initial=0.0)))
        else:
            denom = max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-12)
            worst = max(worst, float(np.linalg.norm(ga - gn) / denom))
    return worst


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"APPTPPCK"
CHECKPOINT_VERSION = 1


def write_atomic(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(values: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> bytes:
    """Serialize arrays as a JSON manifest followed by raw little-endian float64 data."""
    entries = []
    blob = io.BytesIO()
    for name in sorted(values):
        arr = np.ascontiguousarray(values[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": blob.tell()})
        blob.write(arr.tobytes())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": "float64-le",
        "arrays": entries,
        "config": config,
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + blob.getvalue()


def save_checkpoint(path, values: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> None:
    write_atomic(path, checkpoint_bytes(values, config, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + n].decode("utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    if manifest.get("dtype") != "float64-le":
        raise ValueError(f"{path}: unsupported dtype {manifest.get('dtype')!r}")
    body = data[16 + n :]
    values = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        values[e["name"]] = arr.reshape(e["shape"]).astype(FLOAT)
    return values, manifest["config"], manifest["meta"]


def standard_normal(seed: int, *keys: int, size) -> np.ndarray:
    return rng_mod.stream(seed, *keys).standard_normal(size)
