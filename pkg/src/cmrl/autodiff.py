"""Minimal dense reverse-mode autodiff on float64 numpy arrays.

Every operation records its inputs together with a vector-Jacobian product
closure; ``backward`` replays the records in strict reverse execution order
and accumulates gradients additively on leaf tensors.  Only the operator set
needed by the attention networks and the PPO losses is provided.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_SEQ = itertools.count()


class AutodiffError(ValueError):
    pass


class Tensor:
    """A float64 array with an optional gradient slot and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_seq")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)  # (Tensor, vjp) pairs
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, seq={self._seq})"

    # Convenience operators used by the network code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents) -> Tensor:
    return Tensor(data, _parents=parents)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(out: Tensor) -> None:
    """Propagate d(out)/d(leaf) into every ``requires_grad`` leaf.

    ``out`` must be a scalar.  Repeated calls accumulate without reset.
    """
    if out.data.size != 1:
        raise AutodiffError(f"backward requires a scalar output, got shape {out.data.shape}")
    # Collect the reachable subgraph.
    seen: dict[int, Tensor] = {}
    stack = [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        for parent, _ in node._parents:
            stack.append(parent)
    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in sorted(seen.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, vjp in node._parents:
            pg = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                       (b, lambda g: _unbroadcast(g, b.data.shape))])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                       (b, lambda g: _unbroadcast(-g, b.data.shape))])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _make(out, [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                       (b, lambda g: _unbroadcast(g * a.data, b.data.shape))])


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, [(a, lambda g: g * c)])


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _make(out, [(a, lambda g: g @ b.data.T),
                       (b, lambda g: a.data.T @ g)])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        parents.append((t, vjp))
    return _make(out, parents)


def gather_rows(a, indices) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise AutodiffError("gather_rows expects a 2-D input")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise AutodiffError("gather_rows: index out of range")
    out = a.data[idx]

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return acc

    return _make(out, [(a, vjp)])


def row_gather(a, cols) -> Tensor:
    """Pick one column per row: out[i] = a[i, cols[i]]."""
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)
    n = a.data.shape[0]
    if a.data.ndim != 2 or cols.shape != (n,):
        raise AutodiffError("row_gather expects a 2-D input and one column per row")
    if n and (cols.min() < 0 or cols.max() >= a.data.shape[1]):
        raise AutodiffError("row_gather: column index out of range")
    rows = np.arange(n)
    out = a.data[rows, cols]

    def vjp(g):
        acc = np.zeros_like(a.data)
        acc[rows, cols] = g
        return acc

    return _make(out, [(a, vjp)])


def _check_segments(seg: np.ndarray, n_rows: int, n_segments: int, op: str) -> None:
    if seg.shape != (n_rows,):
        raise AutodiffError(f"{op}: segment index shape mismatch")
    if n_rows and (seg.min() < 0 or seg.max() >= n_segments):
        raise AutodiffError(f"{op}: segment index out of range")


def segment_sum(values, seg_index, n_segments: int) -> Tensor:
    values = _as_tensor(values)
    seg = np.asarray(seg_index, dtype=np.int64)
    _check_segments(seg, values.data.shape[0], n_segments, "segment_sum")
    out = np.zeros((n_segments,) + values.data.shape[1:])
    np.add.at(out, seg, values.data)
    return _make(out, [(values, lambda g: g[seg])])


def segment_mean(values, seg_index, n_segments: int) -> Tensor:
    values = _as_tensor(values)
    seg = np.asarray(seg_index, dtype=np.int64)
    _check_segments(seg, values.data.shape[0], n_segments, "segment_mean")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise AutodiffError("segment_mean: empty segment")
    out = np.zeros((n_segments,) + values.data.shape[1:])
    np.add.at(out, seg, values.data)
    denom = counts.reshape((n_segments,) + (1,) * (values.data.ndim - 1))
    out = out / denom
    return _make(out, [(values, lambda g: (g / denom)[seg])])


def segment_max(values, seg_index, n_segments: int) -> Tensor:
    """Per-segment elementwise max; gradient routes to the first maximal row."""
    values = _as_tensor(values)
    seg = np.asarray(seg_index, dtype=np.int64)
    _check_segments(seg, values.data.shape[0], n_segments, "segment_max")
    counts = np.bincount(seg, minlength=n_segments)
    if np.any(counts == 0):
        raise AutodiffError("segment_max: empty segment")
    out = np.full((n_segments,) + values.data.shape[1:], -np.inf)
    np.maximum.at(out, seg, values.data)
    # First row attaining the max within each segment, per column.
    n_rows = values.data.shape[0]
    order = np.arange(n_rows)
    hit = values.data == out[seg]
    order_b = np.broadcast_to(order.reshape((n_rows,) + (1,) * (values.data.ndim - 1)),
                              values.data.shape)
    masked = np.where(hit, order_b, n_rows)
    first = np.full(out.shape, n_rows, dtype=np.int64)
    np.minimum.at(first, seg, masked)

    def vjp(g):
        acc = np.zeros_like(values.data)
        flat_first = first.reshape(n_segments, -1)
        flat_g = g.reshape(n_segments, -1)
        cols = np.arange(flat_first.shape[1])
        for s in range(n_segments):
            acc.reshape(n_rows, -1)[flat_first[s], cols] += flat_g[s]
        return acc

    return _make(out, [(values, vjp)])


def segment_softmax(scores, seg_index, n_segments: int) -> Tensor:
    """Softmax computed independently within each destination segment."""
    scores = _as_tensor(scores)
    seg = np.asarray(seg_index, dtype=np.int64)
    _check_segments(seg, scores.data.shape[0], n_segments, "segment_softmax")
    counts = np.bincount(seg, minlength=n_segments)
    if np.any(counts == 0):
        raise AutodiffError("segment_softmax: empty segment (isolated node without self-loop)")
    seg_hi = np.full((n_segments,) + scores.data.shape[1:], -np.inf)
    np.maximum.at(seg_hi, seg, scores.data)
    z = np.exp(scores.data - seg_hi[seg])
    denom = np.zeros_like(seg_hi)
    np.add.at(denom, seg, z)
    y = z / denom[seg]

    def vjp(g):
        dot = np.zeros_like(seg_hi)
        np.add.at(dot, seg, y * g)
        return y * (g - dot[seg])

    return _make(y, [(scores, vjp)])


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)
    return _make(out, [(a, lambda g: np.where(mask, g, slope * g))])


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), [(a, lambda g: np.where(mask, g, 0.0))])


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))])


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), [(a, lambda g: g / a.data)])


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data ** 2, [(a, lambda g: 2.0 * a.data * g)])


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (feature) axis; gain/bias are applied outside."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    y = (a.data - mu) / std

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (g - gm - y * gym) / std

    return _make(y, [(a, vjp)])


def mean_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise AutodiffError("mean_rows expects a 2-D input")
    n = a.data.shape[0]
    out = a.data.mean(axis=0, keepdims=True)
    return _make(out, [(a, lambda g: np.repeat(g, n, axis=0) / n)])


def max_rows(a) -> Tensor:
    """Column-wise max over rows; ties route the gradient to the first row."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise AutodiffError("max_rows expects a 2-D input")
    out = a.data.max(axis=0, keepdims=True)
    argmax = a.data.argmax(axis=0)

    def vjp(g):
        acc = np.zeros_like(a.data)
        acc[argmax, np.arange(a.data.shape[1])] = g[0]
        return acc

    return _make(out, [(a, vjp)])


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    z = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot)

    return _make(y, [(a, vjp)])


def log_softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def vjp(g):
        return g - y * g.sum(axis=-1, keepdims=True)

    return _make(out, [(a, vjp)])


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(out, [(a, lambda g: _unbroadcast(np.where(take_a, g, 0.0), a.data.shape)),
                       (b, lambda g: _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))])


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), [(a, lambda g: np.where(inside, g, 0.0))])


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.asarray(a.data.sum()), [(a, lambda g: np.full_like(a.data, float(g)))])


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.mean()), [(a, lambda g: np.full_like(a.data, float(g) / n))])


# ---------------------------------------------------------------------------
# Optimization helpers
# ---------------------------------------------------------------------------

def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 0.5) -> dict[str, np.ndarray]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise AutodiffError("clip_global_norm: non-finite gradient")
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


class Adam:
    """Standard Adam with bias correction over a named parameter set."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise AutodiffError(f"adam_step: non-finite gradient for {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float,
              state: Adam | None = None) -> Adam:
    """One Adam update; returns the (possibly fresh) optimizer state."""
    if state is None:
        state = Adam(lr)
    state.lr = lr
    state.step(params, grads)
    return state
