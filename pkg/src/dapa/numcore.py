"""Dense float64 tensors with graph-based reverse-mode differentiation.

Every exposed operation builds a node recording its parents and a backward
closure; `backward` walks the graph in reverse topological order and
accumulates dLoss/dp into leaf tensors that require gradients.  All math is
numpy float64 with sequential row-major reductions, so repeated runs on the
same inputs are bit-identical.  Inference code wraps calls in `no_grad()` to
skip graph construction entirely.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError

# Finite stand-in for -inf in attention masks: exp(NEG_INF - max) underflows
# to exactly 0.0, so masked positions get zero weight and zero gradient
# without introducing non-finite intermediates.
NEG_INF = -1e30

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure-numpy forward)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray.

    Leaf tensors created with requires_grad=True hold a persistent gradient
    buffer that `backward` accumulates into; it is reset only by an explicit
    `zero_grad`.  Tensor data is treated as immutable once created (the
    optimizer replaces parameter data wholesale between graphs).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        # only leaves keep a persistent buffer; interior grads are transient
        self.grad = np.zeros_like(self.data) if (requires_grad and not _parents) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable leaf: value tensor plus persistent grad buffer."""

    __slots__ = ("value", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        self.value = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        if self.value.grad is None:
            self.value.grad = np.zeros_like(self.value.data)
        return self.value.grad

    @property
    def trainable(self) -> bool:
        return self.value.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.value.requires_grad = bool(flag)
        if flag and self.value.grad is None:
            self.value.grad = np.zeros_like(self.value.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.data.shape

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name or 'unnamed'}, shape={self.shape}, trainable={self.trainable})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracing(*inputs: Tensor) -> bool:
    return grad_enabled() and any(t.requires_grad for t in inputs)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data, requires_grad=True, _parents=parents)
    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    """out = a @ b for (..., m, k) @ (..., k, n); batch dims must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2] \
            or a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul operands do not conform: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data
    if not _tracing(a, b):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _node(out_data, (a, b), bwd)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise DimensionError(f"transpose needs >= 2 dims, got shape {x.data.shape}")
    out_data = x.data.swapaxes(-1, -2)
    if not _tracing(x):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g.swapaxes(-1, -2))

    return _node(out_data, (x,), bwd)


def add(a, b) -> Tensor:
    """Elementwise a + b; b may also be a 1-D bias broadcast over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    bias_mode = b.data.ndim == 1 and a.data.ndim > 1 and a.data.shape[-1] == b.data.shape[0]
    if not bias_mode and a.data.shape != b.data.shape:
        raise DimensionError(f"add operands do not conform: {a.data.shape} + {b.data.shape}")
    out_data = a.data + b.data
    if not _tracing(a, b):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            if bias_mode:
                _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
            else:
                _accum(b, g)

    return _node(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul operands do not conform: {a.data.shape} * {b.data.shape}")
    out_data = a.data * b.data
    if not _tracing(a, b):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _node(out_data, (a, b), bwd)


def scale(x, s: float) -> Tensor:
    """Multiply by a python scalar."""
    x = as_tensor(x)
    s = float(s)
    out_data = x.data * s
    if not _tracing(x):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * s)

    return _node(out_data, (x,), bwd)


def shift(x, const) -> Tensor:
    """Add a constant array (no gradient flows to it); used for masks."""
    x = as_tensor(x)
    const = np.asarray(const, dtype=np.float64)
    out_data = x.data + const
    if out_data.shape != x.data.shape:
        raise DimensionError(
            f"shift constant {const.shape} does not broadcast onto {x.data.shape}")
    if not _tracing(x):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g)

    return _node(out_data, (x,), bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)
    if not _tracing(x):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * (1.0 - out_data * out_data))

    return _node(out_data, (x,), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)
    if not _tracing(x):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * (x.data > 0.0))

    return _node(out_data, (x,), bwd)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax along the last axis with per-row max subtraction."""
    x = as_tensor(x)
    if x.data.ndim < 1:
        raise DimensionError("softmax_rows needs at least 1 dim")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)
    if not _tracing(x):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            _accum(x, out_data * (g - inner))

    return _node(out_data, (x,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if not eps > 0.0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.data.shape}/{bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gain.data * xhat + bias.data
    if not _tracing(x, gain, bias):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            term1 = dxhat.mean(axis=-1, keepdims=True)
            term2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv_std * (dxhat - term1 - xhat * term2))

    return _node(out_data, (x, gain, bias), bwd)


def concat_rows(a, b) -> Tensor:
    """Stack (p x d) on top of (q x d) into (p+q x d); p may be 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(
            f"concat_rows operands do not conform: {a.data.shape} over {b.data.shape}")
    p = a.data.shape[0]
    out_data = np.concatenate([a.data, b.data], axis=0)
    if not _tracing(a, b):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g[:p])
        if b.requires_grad:
            _accum(b, g[p:])

    return _node(out_data, (a, b), bwd)


def embedding(table, ids: Sequence[int]) -> Tensor:
    """Gather rows of a (V x d) table by id; backward scatter-adds."""
    table = as_tensor(table)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.data.shape}")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.size == 0:
        raise DegenerateInputError("embedding lookup on empty id sequence")
    if idx.min() < 0 or idx.max() >= table.data.shape[0]:
        raise IndexError(
            f"embedding id out of range [0, {table.data.shape[0]}): {idx.min()}..{idx.max()}")
    out_data = table.data[idx]
    if not _tracing(table):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    return _node(out_data, (table,), bwd)


def split_heads(x, n_heads: int) -> Tensor:
    """Reshape (T x d) into (n_heads x T x d/n_heads)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] % n_heads != 0:
        raise DimensionError(f"cannot split shape {x.data.shape} into {n_heads} heads")
    t, d = x.data.shape
    dh = d // n_heads
    out_data = np.ascontiguousarray(x.data.reshape(t, n_heads, dh).transpose(1, 0, 2))
    if not _tracing(x):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g.transpose(1, 0, 2).reshape(t, d))

    return _node(out_data, (x,), bwd)


def merge_heads(x) -> Tensor:
    """Inverse of split_heads: (h x T x dh) back to (T x h*dh)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"merge_heads needs 3 dims, got {x.data.shape}")
    h, t, dh = x.data.shape
    out_data = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(t, h * dh)
    if not _tracing(x):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g.reshape(t, h, dh).transpose(1, 0, 2))

    return _node(out_data, (x,), bwd)


def sum_all(x) -> Tensor:
    """Sum every element to a scalar."""
    x = as_tensor(x)
    out_data = np.array(x.data.sum())
    if not _tracing(x):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, np.full_like(x.data, float(g)))

    return _node(out_data, (x,), bwd)


def cross_entropy(logits, targets: Sequence[int], ignore_id: int = -1) -> Tensor:
    """Mean negative log-likelihood of targets under row softmax of (T x V) logits.

    Positions whose target equals ignore_id contribute nothing to the loss or
    the gradient.  Uses the log-sum-exp trick; any other out-of-range target
    raises IndexError.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy logits must be 2-D, got {logits.data.shape}")
    t_count, v = logits.data.shape
    tgt = np.asarray(list(targets), dtype=np.int64)
    if tgt.shape != (t_count,):
        raise DimensionError(
            f"cross_entropy targets length {tgt.shape} does not match logits rows {t_count}")
    keep = tgt != ignore_id
    bad = keep & ((tgt < 0) | (tgt >= v))
    if bad.any():
        raise IndexError(f"cross_entropy target id out of range [0, {v}): {tgt[bad][0]}")
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise DegenerateInputError("cross_entropy: every target position is ignored")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    log_z = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    rows = np.nonzero(keep)[0]
    nll = log_z[rows] - logits.data[rows, tgt[rows]]
    out_data = np.array(nll.sum() / n_kept)
    if not _tracing(logits):
        return Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        if logits.requires_grad:
            e = np.exp(z)
            p = e / e.sum(axis=-1, keepdims=True)
            p[rows, tgt[rows]] -= 1.0
            p[~keep] = 0.0
            _accum(logits, p * (float(g) / n_kept))

    return _node(out_data, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into every reachable leaf that requires grad.

    The root must be scalar.  Gradients add onto whatever the leaf buffers
    already hold; call zero_grad between steps.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # interior grads are transient; drop them so a leaf reused in a later
    # graph does not see stale interior state
    for node in topo:
        if node._parents:
            node.grad = None


def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter],
               eps: float = 1e-5) -> float:
    """Compare analytic gradients of fn() against central finite differences.

    fn must rebuild its graph from the given parameters on every call and
    return a scalar loss.  Returns the maximum relative error
    |a - n| / max(|a|, |n|, 1e-8) over every element of every parameter.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"grad_check eps must be in (0, 1e-2], got {eps}")
    params = list(params)
    zero_grads(params)
    loss = fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    max_err = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.value.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(fn().data)
                flat[i] = orig - eps
                f_minus = float(fn().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1e-8)
                max_err = max(max_err, err)
    return max_err
