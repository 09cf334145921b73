"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a fresh ``Tensor`` holding references to its parents
and a closure that maps the upstream gradient to parent gradients.  The graph
is therefore rebuilt on every forward pass and discarded once the loss tensor
goes out of scope.  ``backward`` walks the graph exactly once in reverse
topological order, so two runs over identical graphs produce bit-identical
gradients.

Shape discipline is strict: apart from bias-style rank promotion in ``add``
(a trailing-dimension vector added to a higher-rank tensor) every shape
mismatch raises ``DimensionError``.  All storage is float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (inference / probing)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A float64 array plus an optional gradient buffer and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar.  Scalars are folded in as constants (no graph node for
    # the literal itself).
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_const(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_const(other, -1.0))
        return add_const(self, -float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self):
        return total_sum(self)

    def mean(self):
        return mul_const(total_sum(self), 1.0 / self.size)

    def backward(self) -> None:
        backward(self)


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result; record graph links only when gradients can flow."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into ``t.grad``.

    ``own`` asserts that ``g`` is a freshly allocated array the caller will
    not touch again, letting the first accumulation adopt it without a copy.
    Pass-through gradients (and views) must keep ``own=False``.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar loss."""
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    # Iterative post-order traversal; each node is appended exactly once.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._grad_fn is not None:
            node._grad_fn(node.grad)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a rank-1 ``b`` matching the last axis is promoted."""
    if a.ndim == 1 and b.ndim > 1:
        a, b = b, a
    if a.shape == b.shape:
        def grad_fn(g: np.ndarray) -> None:
            _accumulate(a, g)
            _accumulate(b, g)
        return _node(a.data + b.data, (a, b), grad_fn)
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def grad_fn(g: np.ndarray) -> None:
            _accumulate(a, g)
            _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0), own=True)
        return _node(a.data + b.data, (a, b), grad_fn)
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def add_const(x: Tensor, c) -> Tensor:
    """Add a non-differentiable constant (scalar or broadcastable array)."""
    c_arr = _as_array(c)
    data = x.data + c_arr
    if data.shape != x.shape:
        raise DimensionError(
            f"add_const: constant of shape {c_arr.shape} does not broadcast into {x.shape}"
        )

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g)

    return _node(data, (x,), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(a, g * b.data, own=True)
        _accumulate(b, g * a.data, own=True)

    return _node(a.data * b.data, (a, b), grad_fn)


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a non-differentiable constant (scalar or broadcastable array)."""
    c_arr = _as_array(c)
    data = x.data * c_arr
    if data.shape != x.shape:
        raise DimensionError(
            f"mul_const: constant of shape {c_arr.shape} does not broadcast into {x.shape}"
        )

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, np.multiply(g, c_arr), own=True)

    return _node(data, (x,), grad_fn)


def pow_const(x: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    data = x.data ** exponent

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g * exponent * x.data ** (exponent - 1.0), own=True)

    return _node(data, (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _node(data, (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g.transpose(inverse))

    return _node(x.data.transpose(axes), (x,), grad_fn)


def total_sum(x: Tensor) -> Tensor:
    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _node(x.data.sum(), (x,), grad_fn)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _node(x.data.sum(axis=axis), (x,), grad_fn)


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale each trailing-axis row of ``x`` by the matching entry of ``s``."""
    if s.shape != x.shape[:-1]:
        raise DimensionError(f"row_scale: scale shape {s.shape} does not match rows of {x.shape}")

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g * s.data[..., None], own=True)
        _accumulate(s, (g * x.data).sum(axis=-1), own=True)

    return _node(x.data * s.data[..., None], (x, s), grad_fn)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: both 2-D, equal leading (batch) dimensions, or a
    batched ``a`` against a 2-D ``b`` (the weight case, where the weight
    gradient sums over the batch).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")

    if a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        def grad_fn(g: np.ndarray) -> None:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2), own=True)
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g, own=True)
        return _node(a.data @ b.data, (a, b), grad_fn)

    if b.ndim == 2:
        k, n = b.shape

        def grad_fn(g: np.ndarray) -> None:
            _accumulate(a, g @ b.data.T, own=True)
            _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n), own=True)
        return _node(a.data @ b.data, (a, b), grad_fn)

    raise DimensionError(f"matmul: unsupported batch shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Nonlinearities and losses
# ---------------------------------------------------------------------------


def silu(x: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x), computed without overflow for large |x|."""
    d = x.data
    e = np.exp(-np.abs(d))  # always <= 1, no overflow
    sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, g * sig * (1.0 + d * (1.0 - sig)), own=True)

    return _node(d * sig, (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)), own=True)

    return _node(y, (x,), grad_fn)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned gain."""
    h = x.shape[-1]
    if gain.shape != (h,):
        raise DimensionError(f"rms_norm: gain shape {gain.shape} does not match feature dim {h}")
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xn = x.data / r

    def grad_fn(g: np.ndarray) -> None:
        gg = g * gain.data
        _accumulate(x, (gg - xn * (gg * xn).mean(axis=-1, keepdims=True)) / r, own=True)
        _accumulate(gain, (g * xn).reshape(-1, h).sum(axis=0), own=True)

    return _node(xn * gain.data, (x, gain), grad_fn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax probability of integer targets.

    ``logits`` is [batch, vocab]; ``targets`` is a length-batch index
    sequence with every entry in [0, vocab).
    """
    return cross_entropy_with_nll(logits, targets)[0]


def cross_entropy_with_nll(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """``cross_entropy`` plus the per-row negative log-likelihood array."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    batch, vocab = logits.shape
    if t.shape != (batch,):
        raise DimensionError(f"cross_entropy: {batch} logit rows but targets of shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        bad = int(t[(t < 0) | (t >= vocab)][0])
        raise IndexError(f"cross_entropy: target {bad} out of range for vocabulary of {vocab}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1)
    probs = e / z[:, None]
    rows = np.arange(batch)
    nll = np.log(z) - shifted[rows, t]
    loss = nll.mean()

    def grad_fn(g: np.ndarray) -> None:
        d = probs * (g / batch)
        d[rows, t] -= g / batch
        _accumulate(logits, d, own=True)

    return _node(np.asarray(loss), (logits,), grad_fn), nll


def token_nll(logits_data: np.ndarray, targets) -> np.ndarray:
    """Per-row negative log-likelihoods from raw logit values (no graph)."""
    t = np.asarray(targets, dtype=np.int64)
    shifted = logits_data - logits_data.max(axis=1, keepdims=True)
    z = np.exp(shifted).sum(axis=1)
    return np.log(z) - shifted[np.arange(len(t)), t]


def entropy_mean(probs: Tensor) -> Tensor:
    """Mean over rows of the Shannon entropy -sum(p log p); 0 log 0 is 0."""
    p = probs.data
    rows = p.reshape(-1, p.shape[-1]).shape[0]
    logp = np.log(np.maximum(p, 1e-300))
    value = -(np.where(p > 0, p * logp, 0.0)).sum() / rows

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(probs, -(logp + 1.0) * (g / rows), own=True)

    return _node(np.asarray(value), (probs,), grad_fn)


# ---------------------------------------------------------------------------
# Gather / scatter
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    h = table.shape[-1]

    def grad_fn(g: np.ndarray) -> None:
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, h))
        _accumulate(table, buf, own=True)

    return _node(table.data[ids], (table,), grad_fn)


def index_rows(x: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Select rows ``x[idx]`` along the first axis.

    ``unique=True`` asserts the indices do not repeat, enabling a faster
    scatter in the backward pass.
    """
    idx = np.asarray(idx, dtype=np.int64)

    def grad_fn(g: np.ndarray) -> None:
        buf = np.zeros_like(x.data)
        if unique:
            buf[idx] = g
        else:
            np.add.at(buf, idx, g)
        _accumulate(x, buf, own=True)

    return _node(x.data[idx], (x,), grad_fn)


def scatter_rows(rows: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Place ``rows`` at positions ``idx`` of a zero tensor of ``length`` rows."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((length,) + rows.shape[1:], dtype=np.float64)
    out[idx] = rows.data

    def grad_fn(g: np.ndarray) -> None:
        _accumulate(rows, g[idx], own=True)

    return _node(out, (rows,), grad_fn)


def column(x: Tensor, j: int) -> Tensor:
    """Extract column ``j`` of a 2-D tensor."""
    if x.ndim != 2:
        raise DimensionError(f"column: expected a 2-D tensor, got {x.shape}")

    def grad_fn(g: np.ndarray) -> None:
        buf = np.zeros_like(x.data)
        buf[:, j] = g
        _accumulate(x, buf, own=True)

    return _node(x.data[:, j].copy(), (x,), grad_fn)


# ---------------------------------------------------------------------------
# Verification oracle
# ---------------------------------------------------------------------------


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor.  The relative error per
    coordinate is |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if eps <= 0:
        raise ContractError("finite_diff_check: eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.shape != ():
        raise ContractError(f"finite_diff_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = probe.data.reshape(-1)
    analytic_flat = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(probe).data)
            flat[i] = orig - eps
            fm = float(f(probe).data)
            flat[i] = orig
            central = (fp - fm) / (2.0 * eps)
            a = analytic_flat[i]
            rel = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            worst = max(worst, rel)
    return worst
