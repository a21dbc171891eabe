"""Dense-matrix reverse-mode differentiation engine.

Every value is a 2-D float64 matrix (scalars are 1x1). Operations applied
while a ComputationRecord is active are recorded in creation order;
backward() replays the record in exact reverse order and accumulates
adjoints into each participating Value's .grad. Without an active record,
operations run as plain forward evaluation.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_PROB_CLAMP = 1e-12  # floor applied to probabilities before any log
_ROW_SUM_TOL = 1e-6

_node_ids = itertools.count()


class Value:
    """A matrix node: data, a same-shape gradient accumulator, and an id.

    The gradient buffer starts at zero; it is allocated lazily on first
    access so pure-forward evaluation stays cheap.
    """

    __slots__ = ("data", "_grad", "node_id")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"Value requires a 2-D matrix, got shape {arr.shape}")
        # any nan/inf entry makes the sum non-finite
        if not np.isfinite(arr.sum()):
            raise ValueError("Value data must be finite")
        self.data = arr
        self._grad = None
        self.node_id = next(_node_ids)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 value, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        # dropping the buffer is equivalent to zeroing it; .grad reallocates
        self._grad = None

    def __repr__(self) -> str:
        return f"Value(shape={self.data.shape}, id={self.node_id})"


def scalar(x: float) -> Value:
    return Value(np.array([[float(x)]]))


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Value, ...], output: Value, vjp) -> None:
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class ComputationRecord:
    """Ordered log of applied operations; use as a context manager."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "ComputationRecord":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _ACTIVE.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


# Single-writer: one record active per forward/backward at a time.
_ACTIVE: list[ComputationRecord] = []


def _emit(op: str, inputs: tuple[Value, ...], out_data: np.ndarray, vjp) -> Value:
    out = Value(out_data)
    if _ACTIVE:
        _ACTIVE[-1].nodes.append(_Node(op, inputs, out, vjp))
    return out


def backward(loss: Value, record: ComputationRecord) -> None:
    """Accumulate d(loss)/d(value) into .grad for every value in the record.

    Adjoints are kept in per-pass buffers, so calling backward twice on the
    same record without zeroing grads accumulates exactly twice the
    single-pass gradient.
    """
    if loss.data.shape != (1, 1):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    adjoint: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    holders: dict[int, Value] = {loss.node_id: loss}
    for node in reversed(record.nodes):
        g = adjoint.get(node.output.node_id)
        if g is None:
            continue
        for v, dv in zip(node.inputs, node.vjp(g)):
            if dv is None:
                continue
            holders[v.node_id] = v
            acc = adjoint.get(v.node_id)
            adjoint[v.node_id] = dv if acc is None else acc + dv
    for nid, g in adjoint.items():
        h = holders[nid]
        if h._grad is None:
            h._grad = np.array(g)  # adjoints can alias; own the buffer
        else:
            h._grad += g


def zero_grads(values) -> None:
    for v in values:
        v.zero_grad()


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Value, b: Value) -> Value:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), out, vjp)


def transpose(x: Value) -> Value:
    return _emit("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def add(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scale(x: Value, c: float) -> Value:
    c = float(c)
    return _emit("scale", (x,), c * x.data, lambda g: (c * g,))


def relu(x: Value) -> Value:
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0.0), vjp)


def affine(x: Value, w: Value, bias: Value) -> Value:
    """x @ w + bias, with bias a 1xN row broadcast over the rows of x."""
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"affine dimension mismatch: {x.shape} x {w.shape}")
    if bias.shape != (1, w.shape[1]):
        raise ValueError(f"affine bias must be 1x{w.shape[1]}, got {bias.shape}")
    out = x.data @ w.data + bias.data

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0, keepdims=True)

    return _emit("affine", (x, w, bias), out, vjp)


def concat_cols(xs: Sequence[Value]) -> Value:
    if not xs:
        raise ValueError("concat_cols needs at least one input")
    rows = xs[0].shape[0]
    if any(x.shape[0] != rows for x in xs):
        raise ValueError("concat_cols inputs must share row count")
    widths = [x.shape[1] for x in xs]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.hsplit(g, splits))

    return _emit("concat_cols", tuple(xs), np.hstack([x.data for x in xs]), vjp)


def concat_rows(xs: Sequence[Value]) -> Value:
    if not xs:
        raise ValueError("concat_rows needs at least one input")
    cols = xs[0].shape[1]
    if any(x.shape[1] != cols for x in xs):
        raise ValueError("concat_rows inputs must share column count")
    heights = [x.shape[0] for x in xs]
    splits = np.cumsum(heights)[:-1]

    def vjp(g):
        return tuple(np.vsplit(g, splits))

    return _emit("concat_rows", tuple(xs), np.vstack([x.data for x in xs]), vjp)


def flatten(x: Value) -> Value:
    shape = x.shape

    def vjp(g):
        return (g.reshape(shape),)

    return _emit("flatten", (x,), x.data.reshape(1, -1).copy(), vjp)


def select_rows(x: Value, indices: Sequence[int]) -> Value:
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size == 0:
        raise ValueError("select_rows needs at least one index")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise ValueError("select_rows index out of range")

    def vjp(g):
        dx = np.zeros(x.shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return _emit("select_rows", (x,), x.data[idx].copy(), vjp)


def col_sum(x: Value) -> Value:
    """Sum over rows, returning a 1xN row."""

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("col_sum", (x,), x.data.sum(axis=0, keepdims=True), vjp)


def sum_all(x: Value) -> Value:
    def vjp(g):
        return (np.full(x.shape, g[0, 0]),)

    return _emit("sum_all", (x,), np.array([[x.data.sum()]]), vjp)


def sum_squares(x: Value) -> Value:
    def vjp(g):
        return (2.0 * g[0, 0] * x.data,)

    return _emit("sum_squares", (x,), np.array([[(x.data * x.data).sum()]]), vjp)


def row_softmax(x: Value, scale: float) -> Value:
    """Row-wise softmax of scale*x, stabilized by per-row max subtraction."""
    if scale <= 0:
        raise ValueError("row_softmax scale must be positive")
    z = float(scale) * x.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (float(scale) * y * (g - inner),)

    return _emit("row_softmax", (x,), y, vjp)


def row_layer_norm(x: Value, gain: Value, offset: Value, eps: float = 1e-5) -> Value:
    """Standardize each row to mean 0 / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("row_layer_norm eps must be positive")
    n = x.shape[1]
    if gain.shape != (1, n) or offset.shape != (1, n):
        raise ValueError("row_layer_norm gain/offset must be 1xN rows")
    mu = x.data.mean(axis=1, keepdims=True)
    dev = x.data - mu
    var = (dev * dev).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = dev * inv_std
    out = xhat * gain.data + offset.data

    def vjp(g):
        dxhat = g * gain.data
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        doffset = g.sum(axis=0, keepdims=True)
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return dx, dgain, doffset

    return _emit("row_layer_norm", (x, gain, offset), out, vjp)


def cross_entropy(logits: Value, labels: Sequence[int]) -> Value:
    """Mean negative log-softmax of the labelled class over the batch."""
    b, c = logits.shape
    labels = list(labels)
    if len(labels) != b:
        raise ValueError(f"cross_entropy needs one label per row ({b}), got {len(labels)}")
    if any(l not in (0, 1) for l in labels):
        raise ValueError("cross_entropy labels must be 0 or 1")
    idx = np.asarray(labels, dtype=np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - z[np.arange(b), idx]).mean())
    probs = np.exp(z - lse)

    def vjp(g):
        d = probs.copy()
        d[np.arange(b), idx] -= 1.0
        return (g[0, 0] * d / b,)

    return _emit("cross_entropy", (logits,), np.array([[loss]]), vjp)


def kl_divergence(p: Value, q: Value) -> Value:
    """Mean over rows of sum(p * log(p/q)); gradients flow through both sides.

    Rows must be probability vectors; entries are clamped at 1e-12 before
    the logarithm.
    """
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    for name, v in ("p", p), ("q", q):
        if (v.data < 0).any():
            raise ValueError(f"kl_divergence {name} has negative entries")
        bad = np.abs(v.data.sum(axis=1) - 1.0) > _ROW_SUM_TOL
        if bad.any():
            raise ValueError(f"kl_divergence {name} row {int(np.argmax(bad))} does not sum to 1")
    b = p.shape[0]
    pc = np.maximum(p.data, _PROB_CLAMP)
    qc = np.maximum(q.data, _PROB_CLAMP)
    log_ratio = np.log(pc) - np.log(qc)
    out = float((pc * log_ratio).sum() / b)
    p_live = p.data > _PROB_CLAMP  # clamped entries get no gradient
    q_live = q.data > _PROB_CLAMP

    def vjp(g):
        s = g[0, 0] / b
        dp = np.where(p_live, s * (log_ratio + 1.0), 0.0)
        dq = np.where(q_live, -s * pc / qc, 0.0)
        return dp, dq

    return _emit("kl_divergence", (p, q), np.array([[out]]), vjp)


# ---------------------------------------------------------------------------
# gradient validation


def finite_diff_check(
    f: Callable[[], Value],
    params: Sequence[Value],
    step: float = 1e-5,
    seeds: int = 5,
    randomize: Callable[[np.random.Generator], None] | None = None,
    base_seed: int = 0,
) -> float:
    """Compare analytic gradients of f against central finite differences.

    f rebuilds its forward pass from `params` on every call and returns a
    scalar Value. For each seed the parameter values are re-randomized
    (uniform in [-0.5, 0.5] unless `randomize` is given), the analytic
    gradient is computed once, and every parameter entry is wiggled by
    +-step. Returns the worst relative error, with the denominator floored
    at max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-7 <= step <= 1e-3):
        raise ValueError("finite_diff_check step must lie in [1e-7, 1e-3]")
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(base_seed + s)
        if randomize is None:
            for p in params:
                p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape)
        else:
            randomize(rng)
        zero_grads(params)
        with ComputationRecord() as rec:
            loss = f()
        backward(loss, rec)
        for p in params:
            analytic = p.grad.copy().reshape(-1)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * step)
                denom = max(abs(analytic[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
