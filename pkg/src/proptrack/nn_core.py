"""Minimal dense math with reverse-mode differentiation.

Everything is a 2-D float array wrapped in a Node; the graph is rebuilt on
every forward pass and discarded after backward. Double precision is the
default so finite-difference checks are meaningful; single precision is a
runtime option.

Checkpoints use the "QPT1" container: magic, one JSON header line, then the
raw row-major parameter data.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from contextlib import contextmanager

import numpy as np

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CHECKPOINT_MAGIC = b"QPT1"


class StateError(RuntimeError):
    """Raised when the tape is used out of order (e.g. backward twice)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording; forward passes become plain array math."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """A 2-D array plus the closure that routes gradients to its parents."""

    __slots__ = ("value", "grad", "_parents", "_backward", "_backward_done")

    def __init__(self, value: np.ndarray, parents: tuple = (), backward=None):
        value = np.asarray(value)
        if value.ndim != 2:
            raise ValueError(f"nodes are 2-D, got shape {value.shape}")
        self.value = value
        self.grad = None
        self._parents = parents if _grad_enabled else ()
        self._backward = backward if _grad_enabled else None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    # convenience operators; scalars fold into elementwise ops
    def __add__(self, other):
        return add(self, other) if isinstance(other, Node) else shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Node) else shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Node) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Node) else scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


class Parameter(Node):
    """A named leaf with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, value: np.ndarray):
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(self.value)
        # leaves must survive no_grad construction contexts
        self._parents = ()
        self._backward = None


def constant(value, dtype=np.float64) -> Node:
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Node(arr)


def _unary(value, parent, grad_fn) -> Node:
    if not _grad_enabled:
        return Node(value)
    out = Node(value, (parent,))
    out._backward = lambda g: parent._accum(grad_fn(g))
    return out


def _binary(value, a, b, grad_a, grad_b) -> Node:
    if not _grad_enabled:
        return Node(value)
    out = Node(value, (a, b))

    def backward(g):
        a._accum(grad_a(g))
        b._accum(grad_b(g))

    out._backward = backward
    return out


def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _binary(a.value @ b.value, a, b,
                   lambda g: g @ b.value.T,
                   lambda g: a.value.T @ g)


def add(a: Node, b: Node) -> Node:
    """Elementwise add; b may be a (1, cols) bias row broadcast over a's rows."""
    if a.shape == b.shape:
        return _binary(a.value + b.value, a, b, lambda g: g, lambda g: g)
    if b.rows == 1 and b.cols == a.cols:
        return _binary(a.value + b.value, a, b,
                       lambda g: g,
                       lambda g: g.sum(axis=0, keepdims=True))
    raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _binary(a.value - b.value, a, b, lambda g: g, lambda g: -g)


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return _binary(a.value * b.value, a, b,
                   lambda g: g * b.value,
                   lambda g: g * a.value)


def div(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"div shape mismatch: {a.shape} / {b.shape}")
    return _binary(a.value / b.value, a, b,
                   lambda g: g / b.value,
                   lambda g: -g * a.value / (b.value * b.value))


def scale(a: Node, s: float) -> Node:
    return _unary(a.value * s, a, lambda g: g * s)


def shift(a: Node, s: float) -> Node:
    return _unary(a.value + s, a, lambda g: g)


def neg(a: Node) -> Node:
    return _unary(-a.value, a, lambda g: -g)


def relu(a: Node) -> Node:
    keep = a.value > 0
    return _unary(np.where(keep, a.value, 0.0), a, lambda g: g * keep)


def exp(a: Node) -> Node:
    v = np.exp(a.value)
    return _unary(v, a, lambda g: g * v)


def log(a: Node) -> Node:
    return _unary(np.log(a.value), a, lambda g: g / a.value)


def sigmoid(a: Node) -> Node:
    v = np.where(a.value >= 0,
                 1.0 / (1.0 + np.exp(-np.clip(a.value, 0, None))),
                 np.exp(np.clip(a.value, None, 0)) / (1.0 + np.exp(np.clip(a.value, None, 0))))
    return _unary(v, a, lambda g: g * v * (1.0 - v))


def absolute(a: Node) -> Node:
    s = np.sign(a.value)
    return _unary(np.abs(a.value), a, lambda g: g * s)


def maximum(a: Node, b: Node) -> Node:
    take_a = a.value >= b.value
    return _binary(np.where(take_a, a.value, b.value), a, b,
                   lambda g: g * take_a,
                   lambda g: g * ~take_a)


def minimum(a: Node, b: Node) -> Node:
    take_a = a.value <= b.value
    return _binary(np.where(take_a, a.value, b.value), a, b,
                   lambda g: g * take_a,
                   lambda g: g * ~take_a)


def clamp_min(a: Node, floor: float) -> Node:
    keep = a.value > floor
    return _unary(np.where(keep, a.value, floor), a, lambda g: g * keep)


def transpose(a: Node) -> Node:
    return _unary(a.value.T, a, lambda g: g.T)


def sum_all(a: Node) -> Node:
    return _unary(np.array([[a.value.sum()]]), a,
                  lambda g: np.full_like(a.value, g[0, 0]))


def sum_rows(a: Node) -> Node:
    """Column vector of per-row sums, (rows, 1)."""
    return _unary(a.value.sum(axis=1, keepdims=True), a,
                  lambda g: np.broadcast_to(g, a.shape).copy())


def mean_all(a: Node) -> Node:
    n = a.value.size
    return _unary(np.array([[a.value.mean()]]), a,
                  lambda g: np.full_like(a.value, g[0, 0] / n))


def concat_rows(nodes: list[Node]) -> Node:
    if not nodes:
        raise ValueError("concat_rows needs at least one node")
    cols = nodes[0].cols
    for n in nodes:
        if n.cols != cols:
            raise ValueError("concat_rows column mismatch")
    value = np.concatenate([n.value for n in nodes], axis=0)
    if not _grad_enabled:
        return Node(value)
    out = Node(value, tuple(nodes))

    def backward(g):
        at = 0
        for n in nodes:
            n._accum(g[at:at + n.rows])
            at += n.rows

    out._backward = backward
    return out


def concat_cols(nodes: list[Node]) -> Node:
    if not nodes:
        raise ValueError("concat_cols needs at least one node")
    value = np.concatenate([n.value for n in nodes], axis=1)
    if not _grad_enabled:
        return Node(value)
    out = Node(value, tuple(nodes))

    def backward(g):
        at = 0
        for n in nodes:
            n._accum(g[:, at:at + n.cols])
            at += n.cols

    out._backward = backward
    return out


def gather_rows(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)

    def backward_grad(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        return ga

    return _unary(a.value[idx], a, backward_grad)


def slice_rows(a: Node, start: int, stop: int) -> Node:
    def backward_grad(g):
        ga = np.zeros_like(a.value)
        ga[start:stop] = g
        return ga

    return _unary(a.value[start:stop].copy(), a, backward_grad)


def slice_cols(a: Node, start: int, stop: int) -> Node:
    def backward_grad(g):
        ga = np.zeros_like(a.value)
        ga[:, start:stop] = g
        return ga

    return _unary(a.value[:, start:stop].copy(), a, backward_grad)


def softmax_rows(a: Node, forbidden: np.ndarray | None = None) -> Node:
    """Row softmax; `forbidden` marks pairs that must get exactly zero weight.

    Rows with every position forbidden come out as all-zero rows.
    """
    logits = a.value
    if forbidden is not None:
        if forbidden.shape != a.shape:
            raise ValueError(f"mask shape {forbidden.shape} != logits shape {a.shape}")
        logits = np.where(forbidden, -np.inf, logits)
    row_max = np.max(logits, axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(logits - row_max)
    denom = e.sum(axis=1, keepdims=True)
    w = e / np.where(denom > 0, denom, 1.0)

    def backward_grad(g):
        dot = (g * w).sum(axis=1, keepdims=True)
        return w * (g - dot)

    return _unary(w, a, backward_grad)


def layernorm_rows(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Per-row layer normalization with (1, cols) gain and bias."""
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise ValueError("layernorm gain/bias must be (1, cols)")
    mu = x.value.mean(axis=1, keepdims=True)
    var = x.value.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    value = xhat * gain.value + bias.value
    if not _grad_enabled:
        return Node(value)
    out = Node(value, (x, gain, bias))
    cols = x.cols

    def backward(g):
        gxhat = g * gain.value
        dx = inv * (gxhat
                    - gxhat.mean(axis=1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        x._accum(dx)
        gain._accum((g * xhat).sum(axis=0, keepdims=True))
        bias._accum(g.sum(axis=0, keepdims=True))
        _ = cols

    out._backward = backward
    return out


def attention(q: Node, k: Node, v: Node, heads: int,
              mask: np.ndarray | None = None) -> tuple[Node, np.ndarray]:
    """Scaled dot-product multi-head attention on pre-projected q/k/v.

    mask[i, j] True forbids query i from attending to key j; a fully
    forbidden row yields a zero output row. Returns the concatenated head
    outputs and a (heads, Nq, Nk) copy of the attention weights.
    """
    if q.cols != k.cols or k.shape != v.shape:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if q.cols % heads != 0:
        raise ValueError(f"width {q.cols} not divisible by {heads} heads")
    if mask is not None and mask.shape != (q.rows, k.rows):
        raise ValueError(f"attention mask shape {mask.shape} != ({q.rows}, {k.rows})")
    dh = q.cols // heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    outs = []
    weights = np.empty((heads, q.rows, k.rows), dtype=q.value.dtype)
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        logits = scale(matmul(qh, transpose(kh)), inv_sqrt)
        w = softmax_rows(logits, forbidden=mask)
        weights[h] = w.value
        outs.append(matmul(w, vh))
    return concat_cols(outs), weights


def backward(loss: Node):
    """Populate gradients of every parameter reachable from a scalar loss."""
    if loss.shape != (1, 1):
        raise ValueError(f"loss must be scalar-shaped (1, 1), got {loss.shape}")
    if loss._backward_done:
        raise StateError("backward already ran for this loss; run a new forward first")
    loss._backward_done = True

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class ParamStore:
    """Named parameters with paired gradient buffers and Adam state."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.params: dict[str, Parameter] = {}
        self.rng = np.random.default_rng(seed)
        self.rng_seed = seed
        self.dtype = np.dtype(dtype)
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._step_count = 0

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.asarray(value, dtype=self.dtype))
        self.params[name] = p
        return p

    def normal(self, name: str, rows: int, cols: int, std: float = 0.02) -> Parameter:
        """Truncated normal init (clipped at two standard deviations)."""
        raw = self.rng.normal(0.0, std, size=(rows, cols))
        return self.add(name, np.clip(raw, -2.0 * std, 2.0 * std))

    def zeros(self, name: str, rows: int, cols: int) -> Parameter:
        return self.add(name, np.zeros((rows, cols)))

    def ones(self, name: str, rows: int, cols: int) -> Parameter:
        return self.add(name, np.ones((rows, cols)))

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def zero_grads(self):
        for p in self.params.values():
            p.grad[...] = 0.0
            p._backward_done = False

    def step(self, lr: float, betas: tuple[float, float] = ADAM_BETAS,
             eps: float = ADAM_EPS):
        """One Adam update from the current gradient buffers."""
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise ValueError(f"non-finite gradient in parameter {name!r}")
        self._step_count += 1
        t = self._step_count
        b1, b2 = betas
        for name, p in self.params.items():
            if name not in self._moments:
                self._moments[name] = (np.zeros_like(p.value), np.zeros_like(p.value))
            m, v = self._moments[name]
            m += (1.0 - b1) * (p.grad - m)
            v += (1.0 - b2) * (p.grad * p.grad - v)
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def save(self, path: str, config: dict | None = None):
        header = {
            "dtype": self.dtype.name,
            "config": config or {},
            "params": [
                {"name": name, "rows": p.rows, "cols": p.cols}
                for name, p in self.params.items()
            ],
        }
        payload = CHECKPOINT_MAGIC + b"\n" + json.dumps(header).encode() + b"\n"
        blobs = [p.value.astype("<f8").tobytes() for p in self.params.values()]
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(payload)
                for blob in blobs:
                    f.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> tuple["ParamStore", dict]:
        with open(path, "rb") as f:
            magic = f.readline().strip()
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"not a QPT1 checkpoint: {path}")
            header = json.loads(f.readline().decode())
            store = cls(dtype=np.dtype(header["dtype"]))
            for meta in header["params"]:
                n = meta["rows"] * meta["cols"]
                data = np.frombuffer(f.read(n * 8), dtype="<f8").reshape(
                    meta["rows"], meta["cols"])
                store.add(meta["name"], data)
        return store, header.get("config", {})
