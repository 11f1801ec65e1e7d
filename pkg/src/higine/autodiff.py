"""Minimal dense reverse-mode automatic differentiation.

Everything is a 2-D float64 matrix; scalars are 1x1. Operations executed
while a :class:`Tape` is active (``with Tape() as tape:``) and touching at
least one tensor with ``requires_grad`` are recorded, and
``tape.backward(loss)`` replays them in reverse.

    >>> W = Tensor([[-1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(relu(W))
    >>> tape.backward(loss)
    >>> W.grad
    array([[0., 1.]])
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteDetected, NotOnTape, ShapeMismatch

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name", "_tape")

    def __init__(self, value, requires_grad=False, name=None):
        v = np.array(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got shape {v.shape}")
        self.value = v
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(v) if requires_grad else None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def item(self):
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a valid topological order, so backward is a single
    reverse sweep.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out, parents, backward_fn):
        out._tape = self
        self.records.append((out, parents, backward_fn))

    def backward(self, loss):
        if loss._tape is not self:
            raise NotOnTape("loss was not produced on this tape")
        if loss.shape != (1, 1):
            raise ShapeMismatch(f"backward needs a scalar loss, got {loss.shape}")
        pending = {id(loss): np.ones((1, 1))}
        for out, parents, backward_fn in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
                elif parent.grad is not None:
                    parent.grad += pg


def backward(loss, tape):
    tape.backward(loss)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(value, parents, backward_fn, opname):
    if not np.all(np.isfinite(value)):
        raise NonFiniteDetected(f"non-finite output from {opname}")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.name = None
    out._tape = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad and _ACTIVE:
        _ACTIVE[-1].record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


def index_sum(values, index, n_out):
    """Row-wise ``out[index[i]] += values[i]`` into ``n_out`` rows."""
    m = len(index)
    if m == 0:
        return np.zeros((n_out, values.shape[1]))
    incidence = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n_out, m))
    return np.asarray(incidence @ values)


def _segment_starts(seg, n_seg):
    if np.any(np.diff(seg) < 0):
        raise ShapeMismatch("segments must be contiguous and ascending")
    starts = np.searchsorted(seg, np.arange(n_seg), side="left")
    ends = np.searchsorted(seg, np.arange(n_seg), side="right")
    if np.any(ends == starts):
        raise ShapeMismatch("empty segment")
    return starts


# -- forward primitives ------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return _finish(av @ bv, (a, b), back, "matmul")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _finish(a.value + b.value, (a, b), back, "add")


def mul(a, b):
    """Elementwise product with row/column/scalar broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _finish(av * bv, (a, b), back, "mul")


def scale_rows(a, s):
    """Multiply row i of ``a`` by ``s[i]``; ``s`` is an n x 1 Tensor or a 1-D array."""
    if not isinstance(s, Tensor):
        s = Tensor(np.asarray(s, dtype=np.float64).reshape(-1, 1))
    if s.shape != (a.shape[0], 1):
        raise ShapeMismatch(f"scale_rows: {a.shape} with scales {s.shape}")
    return mul(a, s)


def relu(a):
    mask = a.value > 0

    def back(g):
        return (g * mask,)

    return _finish(a.value * mask, (a,), back, "relu")


def tanh(a):
    t = np.tanh(a.value)

    def back(g):
        return (g * (1.0 - t * t),)

    return _finish(t, (a,), back, "tanh")


def sigmoid(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))

    def back(g):
        return (g * s * (1.0 - s),)

    return _finish(s, (a,), back, "sigmoid")


def concat_cols(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"concat_cols: {a.shape} and {b.shape}")
    split = a.shape[1]

    def back(g):
        return g[:, :split], g[:, split:]

    return _finish(np.concatenate([a.value, b.value], axis=1), (a, b), back, "concat_cols")


def dropout(a, p, training, rng):
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)

    def back(g):
        return (g * mask,)

    return _finish(a.value * mask, (a,), back, "dropout")


def gather_rows(a, idx):
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]

    def back(g):
        return (index_sum(g, idx, n),)

    return _finish(a.value[idx], (a,), back, "gather_rows")


def scatter_sum(m, target, n_out):
    """``out[j] = sum of m[i] over i with target[i] == j``."""
    target = np.asarray(target, dtype=np.intp)
    if target.shape[0] != m.shape[0]:
        raise ShapeMismatch(f"scatter_sum: {m.shape[0]} messages, {target.shape[0]} targets")

    def back(g):
        return (g[target],)

    return _finish(index_sum(m.value, target, n_out), (m,), back, "scatter_sum")


def edge_aggregate(h, src, dst, weights=None, w_e=None):
    """Fused neighbour sum over directed edges ``src -> dst``.

    Without an edge embedding this is ``A @ h`` with ``A[v, u]`` counting
    edges ``u -> v``. With ``w_e`` (1 x d) each message is
    ``relu(h[u] + weights[e] * w_e)``. Equivalent to ``gather_rows`` ->
    (``relu``) -> ``scatter_sum`` but without recording the E x d
    intermediates.
    """
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    n = h.shape[0]
    m = src.size
    adj = sp.csr_matrix((np.ones(m), (dst, src)), shape=(n, n))
    if w_e is None:
        adjt = adj.T.tocsr()

        def back(g):
            return (np.asarray(adjt @ g),)

        return _finish(np.asarray(adj @ h.value), (h,), back, "edge_aggregate")

    if w_e.shape != (1, h.shape[1]):
        raise ShapeMismatch(f"edge embedding {w_e.shape} for node width {h.shape[1]}")
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    pre = h.value[src] + w * w_e.value
    active = pre > 0
    msg = pre * active
    incidence = sp.csr_matrix((np.ones(m), (dst, np.arange(m))), shape=(n, m))

    def back(g):
        gm = g[dst] * active
        return index_sum(gm, src, n), w.T @ gm

    return _finish(np.asarray(incidence @ msg), (h, w_e), back, "edge_aggregate")


def segment_mean(a, seg, n_seg):
    seg = np.asarray(seg, dtype=np.intp)
    counts = np.bincount(seg, minlength=n_seg).astype(np.float64)[:, None]
    if np.any(counts == 0):
        raise ShapeMismatch("segment_mean: empty segment")

    def back(g):
        return ((g / counts)[seg],)

    return _finish(index_sum(a.value, seg, n_seg) / counts, (a,), back, "segment_mean")


def segment_max(a, seg, n_seg):
    """Column-wise max per contiguous segment; backward goes to the first argmax row."""
    seg = np.asarray(seg, dtype=np.intp)
    n, d = a.shape
    starts = _segment_starts(seg, n_seg)
    best = np.maximum.reduceat(a.value, starts, axis=0)
    rows = np.where(a.value == best[seg], np.arange(n)[:, None], n)
    first = np.minimum.reduceat(rows, starts, axis=0)
    cols = np.broadcast_to(np.arange(d), (n_seg, d))

    def back(g):
        out = np.zeros((n, d))
        out[first, cols] = g
        return (out,)

    return _finish(best, (a,), back, "segment_max")


def global_mean(a):
    return segment_mean(a, np.zeros(a.shape[0], dtype=np.intp), 1)


def global_max(a):
    return segment_max(a, np.zeros(a.shape[0], dtype=np.intp), 1)


def sum_all(a):
    shape = a.shape

    def back(g):
        return (np.full(shape, g[0, 0]),)

    return _finish(np.array([[a.value.sum()]]), (a,), back, "sum_all")


def topk_indices(scores, k):
    """Indices of the ``k`` largest scores, descending; ties go to the lower index."""
    s = scores.value.reshape(-1) if isinstance(scores, Tensor) else np.asarray(scores, dtype=float).reshape(-1)
    if not 1 <= k <= s.size:
        raise ValueError(f"k must be in [1, {s.size}], got {k}")
    order = np.lexsort((np.arange(s.size), -s))
    return order[:k]


def segment_topk(scores, seg, k_per_seg):
    """Per-segment top-k over contiguous segments, ordered by segment then score."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    seg = np.asarray(seg, dtype=np.intp)
    order = np.lexsort((np.arange(s.size), -s, seg))
    seg_sorted = seg[order]
    starts = np.searchsorted(seg_sorted, seg_sorted, side="left")
    rank = np.arange(s.size) - starts
    return order[rank < np.asarray(k_per_seg)[seg_sorted]]


def log_softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(x):
    return np.exp(log_softmax(np.asarray(x, dtype=float)))


def softmax_cross_entropy(logits, labels, class_weights=None):
    """Weighted cross-entropy averaged over rows: ``sum_i w[y_i] * CE_i / n``."""
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeMismatch(f"{n} logit rows, {labels.shape[0]} labels")
    w = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=float)
    row_w = w[labels] / n
    lsm = log_softmax(logits.value)
    loss = -(row_w * lsm[np.arange(n), labels]).sum()
    probs = np.exp(lsm)

    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g[0, 0] * row_w[:, None] * d,)

    return _finish(np.array([[loss]]), (logits,), back, "softmax_cross_entropy")


# -- optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One Adam update with decoupled weight decay, in place on ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.value.shape or m.shape != p.value.shape:
            raise ShapeMismatch(f"{p!r}: grad {g.shape}, moment {m.shape}")
        if state.weight_decay:
            p.value -= state.lr * state.weight_decay * p.value
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# -- verification ----------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    n_checked: int

    def passed(self, tolerance):
        return self.max_rel_error <= tolerance


def grad_check(model_forward, params, tolerance=1e-4, h=1e-4, floor=1e-7):
    """Compare tape gradients against central finite differences.

    ``model_forward`` is a zero-argument closure returning a scalar loss
    Tensor; it must be deterministic. Relative error per element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = model_forward()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    per_param = {}
    worst = 0.0
    count = 0
    for i, p in enumerate(params):
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = model_forward().item()
            flat[j] = orig - h
            down = model_forward().item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(numeric)), floor)
        err = float(np.max(np.abs(analytic[i] - numeric) / denom)) if numeric.size else 0.0
        per_param[p.name or f"param{i}"] = err
        worst = max(worst, err)
        count += numeric.size
    for p in params:
        p.zero_grad()
    return GradCheckReport(worst, per_param, count)


def glorot(rng, fan_in, fan_out, name=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)
