"""A small reverse-mode autodiff engine over float64 numpy arrays, plus AdamW.

Ops executed inside an active :class:`Tape` are recorded in execution order;
:func:`backward` walks them in reverse. Outside a tape the same functions
just compute values, which is what inference uses.

    with Tape() as tape:
        loss, _ = softmax_cross_entropy(matmul(x, w), targets)
    grads = backward(tape, loss, {"w": w})
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class Tensor:
    __slots__ = ("value", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, value, requires_grad: bool = False, *, parents=(), backward_fn=None, op: str = "leaf"):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def Parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=DTYPE), requires_grad=True)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops. Use as a context manager."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(value: np.ndarray, op: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _result(value, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op output; record it if a tape is active and any input needs grad."""
    value = np.asarray(value, dtype=DTYPE)
    _check_finite(value, op)
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    out = Tensor(value, True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _result(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.value * c, (a,), lambda g: (g * c,), "scale")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _result(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def matmul(a, b) -> Tensor:
    """``a @ b`` for (..., m, k) x (..., k, n); leading dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    # shared 2-D weight: fold leading dims into one GEMM
    folded = b.ndim == 2 and a.ndim > 2

    def back(g):
        ga = gb = None
        if folded:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bv.T).reshape(a.shape)
            if b.requires_grad:
                gb = av.reshape(-1, av.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    if folded:
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[1],))
    else:
        out = av @ bv
    return _result(out, (a, b), back, "matmul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _result(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), back, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.value
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (x, gain, bias), back, "layer_norm")


def dropout(a, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    a = as_tensor(a)
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.value * mask, (a,), lambda g: (g * mask,), "dropout")


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")

    flat = ids.reshape(-1)

    def back(g):
        return (IndexGrad(table.shape, flat, g.reshape(-1, table.shape[1]), False),)

    return _result(table.value[ids], (table,), back, "embedding")


class IndexGrad:
    """Gradient that is zero except at ``index``; scattered into the parent's
    accumulator instead of materialising a dense zero array per use."""

    __slots__ = ("shape", "index", "g", "basic")

    def __init__(self, shape, index, g, basic):
        self.shape, self.index, self.g, self.basic = shape, index, g, basic

    def add_to(self, buf: np.ndarray) -> None:
        if self.basic:
            buf[self.index] += self.g
        else:
            np.add.at(buf, self.index, self.g)

    def dense(self) -> np.ndarray:
        buf = np.zeros(self.shape, dtype=DTYPE)
        self.add_to(buf)
        return buf


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(index)

    return _result(a.value[index], (a,), lambda g: (IndexGrad(shape, index, g, basic),), "getitem")



def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.value for t in tensors], axis=axis), tensors, back, "stack")


def lstm_scan(xw, u) -> Tensor:
    """Run an LSTM over pre-projected inputs.

    ``xw`` is (batch, steps, 4H) holding ``x_t W + b`` with gate blocks ordered
    input, forget, cell, output; ``u`` is the (H, 4H) recurrent matrix. State
    starts at zero. Returns all hidden states, (batch, steps, H).
    """
    xw, u = as_tensor(xw), as_tensor(u)
    B, T, G = xw.shape
    H = u.shape[0]
    if G != 4 * H or u.shape[1] != 4 * H:
        raise ValueError(f"lstm_scan shape mismatch: {xw.shape} vs {u.shape}")
    uv = u.value
    gates = np.empty((B, T, 4 * H))
    cells = np.empty((B, T, H))
    tcells = np.empty((B, T, H))
    hs = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = xw.value[:, t] + h @ uv
        a = gates[:, t]
        a[:, :2 * H] = 0.5 * (1.0 + np.tanh(0.5 * z[:, :2 * H]))
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = 0.5 * (1.0 + np.tanh(0.5 * z[:, 3 * H:]))
        i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cells[:, t], tcells[:, t], hs[:, t] = c, tc, h

    def back(dhs):
        dz_all = np.empty((B, T, 4 * H))
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            a = gates[:, t]
            i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = tcells[:, t]
            dh = dh + dhs[:, t]
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            if t > 0:
                dz[:, H:2 * H] = dc * cells[:, t - 1] * f * (1.0 - f)
            else:
                dz[:, H:2 * H] = 0.0
            dc = dc * f
            dh = dz @ uv.T
        gu = None
        if u.requires_grad:
            hprev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
            gu = hprev.reshape(-1, H).T @ dz_all.reshape(-1, 4 * H)
        return dz_all, gu

    return _result(hs, (xw, u), back, "lstm_scan")


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over rows; returns ``(loss, probabilities)``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError("logits must be (batch, classes)")
    n, c = logits.shape
    if c < 2:
        raise ValueError("need at least two classes")
    if targets.shape != (n,):
        raise ValueError("one target per row required")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target out of range [0, {c})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def back(g):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _result(loss, (logits,), back, "softmax_cross_entropy"), probs


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> dict:
    """Reverse sweep over ``tape`` from scalar ``loss``.

    Returns gradients keyed like ``params`` (zeros for parameters the loss
    does not reach). Without ``params`` the result is keyed by ``id`` of every
    leaf that received a gradient.
    """
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return {k: np.zeros_like(p.value) for k, p in (params or {}).items()}
    if not any(node is loss for node in reversed(tape.nodes)):
        raise ValueError("loss was not recorded on this tape")
    grads[id(loss)] = np.ones((), dtype=DTYPE)
    owned: set[int] = set()  # keys whose buffer is private and may be updated in place
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            cur = grads.get(key)
            if isinstance(pg, IndexGrad):
                if cur is None:
                    cur = np.zeros(pg.shape, dtype=DTYPE)
                elif key not in owned:
                    cur = np.array(cur, dtype=DTYPE)
                pg.add_to(cur)
                grads[key] = cur
                owned.add(key)
            elif cur is None:
                grads[key] = pg
            elif key in owned:
                cur += pg
            else:
                grads[key] = cur + pg
                owned.add(key)
            if parent.backward_fn is None:
                leaves[key] = parent
    if params is None:
        return {k: grads[k] for k in leaves}
    return {name: grads.get(id(p), np.zeros_like(p.value)) for name, p in params.items()}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    weight_decay: float = 0.004
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    state.t += 1
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.value.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * ((m / c1) / (np.sqrt(v / c2) + state.epsilon))
        if state.weight_decay:
            update = update + (lr * state.weight_decay) * p.value
        p.value = p.value - update
    return state
