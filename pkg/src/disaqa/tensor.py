"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps a float ndarray and records the operations applied to it
on a dynamic tape (each result keeps closures over its parents).  Calling
``backward()`` on a scalar result walks the tape in reverse topological
order and accumulates gradients into every tensor that requires them.

Float64 is the default dtype so that finite-difference gradient checking is
meaningful; float32 is accepted for cheaper training runs.  Integer data
(token ids, index maps) stays in plain numpy arrays and is passed to ops
like ``embedding`` and ``gather_time`` unwrapped.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.float32, np.float64)

# Tape recording can be suspended (e.g. during validation inference) to skip
# graph bookkeeping entirely.
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables tape recording inside its block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- autograd ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Run reverse-mode accumulation from this tensor.

        ``grad`` defaults to ones, which is only permitted for scalars.
        Iterative topological sort: LSTM-style graphs are deeper than the
        interpreter's recursion limit.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient requires a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return mul(tensor_sum(self, axis=axis), 1.0 / n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, recording tape info only when it can matter."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and structural ops -----------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on the leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), bw)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - out * out))

    return _make(out, (x,), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Stable in both tails: exp of a non-positive argument only.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid_np(x.data)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF, not the tanh fit."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return _make(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    x = _as_tensor(x)
    if x.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate((g - dot) * out)

    return _make(out, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        n = x.data.shape[-1]
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.data.shape))
        if x.requires_grad:
            gx_hat = g * gamma.data
            term1 = gx_hat
            term2 = gx_hat.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((term1 - term2 - term3) * inv)

    return _make(out, (x, gamma, beta), bw)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target: int) -> Tensor:
    """Negative log softmax probability of ``target`` for a 1-D logit vector."""
    logits = _as_tensor(logits)
    if logits.ndim != 1:
        raise ValueError(f"cross_entropy expects a 1-D logit vector, got shape {logits.shape}")
    n = logits.data.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"cross_entropy target {target} out of range for {n} logits")
    return cross_entropy_rows(reshape(logits, (1, n)), np.array([target])).mean()


def cross_entropy_rows(logits, targets: np.ndarray) -> Tensor:
    """Per-row cross entropy for a [B, L] logit matrix and int targets [B]."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    b, n = logits.data.shape
    if targets.shape != (b,):
        raise ValueError(f"targets shape {targets.shape} does not match batch {b}")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= n:
        raise IndexError("cross_entropy target index out of range")
    ls = _log_softmax_np(logits.data)
    rows = np.arange(b)
    out = -ls[rows, targets]

    def bw(g):
        p = np.exp(ls)
        p[rows, targets] -= 1.0
        logits._accumulate(p * g[:, None])

    return _make(out, (logits,), bw)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = table.data[ids]

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    return _make(out, (table,), bw)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: active only in train mode, identity otherwise."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    out = x.data * keep * scale

    def bw(g):
        x._accumulate(g * keep * scale)

    return _make(out, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out, tuple(tensors), bw)


def _getitem(x: Tensor, key) -> Tensor:
    """Basic indexing (ints / slices / tuples thereof).

    Basic indexing never selects the same element twice, so the backward
    pass can add straight into the sliced view of the gradient buffer.
    """
    out = x.data[key]

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[key] += g

    return _make(out, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(out, (x,), bw)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _as_tensor(x)
    out = x.data.swapaxes(a, b)

    def bw(g):
        x._accumulate(g.swapaxes(a, b))

    return _make(out, (x,), bw)


def transpose(x) -> Tensor:
    """Transpose the last two axes."""
    return swapaxes(x, -1, -2)


def gather_time(x, idx: np.ndarray) -> Tensor:
    """Per-row time reindex: out[b, t] = x[b, idx[b, t]].

    ``idx`` must be a per-row permutation of time positions (the use case is
    length-aware sequence reversal), which keeps the backward pass free of
    duplicate-index collisions.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx)
    b, l = idx.shape
    if x.data.shape[:2] != (b, l):
        raise ValueError(f"gather_time index shape {idx.shape} does not match input {x.shape}")
    rows = np.arange(b)[:, None]
    out = x.data[rows, idx]

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        # Row-wise permutation: no duplicates, fancy add is safe.
        x.grad[rows, idx] += g

    return _make(out, (x,), bw)


def lstm_cell_update(z, c_prev, dh: int) -> Tensor:
    """New cell state from packed gate pre-activations z = [i | f | g | o].

    c_t = sigmoid(f) * c_prev + sigmoid(i) * tanh(g).  Fusing the three
    gate nonlinearities into one tape node keeps recurrence graphs small;
    the o columns of z are untouched here (zero gradient contribution).
    """
    z, c_prev = _as_tensor(z), _as_tensor(c_prev)
    if z.data.shape[-1] != 4 * dh or c_prev.data.shape[-1] != dh:
        raise ValueError(f"gate width {z.shape} does not match dh={dh}")
    i = _sigmoid_np(z.data[:, :dh])
    f = _sigmoid_np(z.data[:, dh:2 * dh])
    g = np.tanh(z.data[:, 2 * dh:3 * dh])
    out = f * c_prev.data + i * g

    def bw(gc):
        if z.requires_grad:
            gz = np.zeros_like(z.data)
            gz[:, :dh] = gc * g * i * (1.0 - i)
            gz[:, dh:2 * dh] = gc * c_prev.data * f * (1.0 - f)
            gz[:, 2 * dh:3 * dh] = gc * i * (1.0 - g * g)
            z._accumulate(gz)
        if c_prev.requires_grad:
            c_prev._accumulate(gc * f)

    return _make(out, (z, c_prev), bw)


def lstm_hidden(z, c, dh: int) -> Tensor:
    """Hidden state h_t = sigmoid(o) * tanh(c_t) from packed gates and cell."""
    z, c = _as_tensor(z), _as_tensor(c)
    if z.data.shape[-1] != 4 * dh or c.data.shape[-1] != dh:
        raise ValueError(f"gate width {z.shape} does not match dh={dh}")
    o = _sigmoid_np(z.data[:, 3 * dh:])
    th = np.tanh(c.data)
    out = o * th

    def bw(gh):
        if z.requires_grad:
            gz = np.zeros_like(z.data)
            gz[:, 3 * dh:] = gh * th * o * (1.0 - o)
            z._accumulate(gz)
        if c.requires_grad:
            c._accumulate(gh * o * (1.0 - th * th))

    return _make(out, (z, c), bw)


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _make(out, (x,), bw)


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` (bias broadcast over leading axes)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- gradient checking -------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of a finite-difference check against the tape gradients."""

    max_rel_error: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol

    def to_json(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_param": self.worst_param,
            "per_param": self.per_param,
            "checked_entries": self.checked_entries,
        }


# Entries where both gradients sit below this magnitude are reported as zero
# error: central differences cannot resolve them above float64 rounding noise.
_GRAD_FLOOR = 1e-5


def grad_check(loss_fn, params: dict[str, Tensor], eps: float = 1e-5,
               max_entries_per_param: int | None = None,
               seed: int = 0) -> GradReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the forward pass from ``params`` on every call
    and return a scalar Tensor.  Frozen parameters (requires_grad False) are
    reported with exactly zero error and zero gradient.  ``eps`` must lie in
    [1e-6, 1e-3] where float64 central differences are trustworthy.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside the trusted range [1e-6, 1e-3]")

    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss is not finite")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    checked = 0
    for name, p in params.items():
        if not p.requires_grad:
            per_param[name] = 0.0
            continue
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if max_entries_per_param is not None and n > max_entries_per_param:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            entries = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        worst_here = 0.0
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[i]
            denom = max(abs(a), abs(numeric))
            if denom < _GRAD_FLOOR:
                err = 0.0
            else:
                err = abs(a - numeric) / denom
            worst_here = max(worst_here, err)
            checked += 1
        per_param[name] = worst_here
        if worst_here >= worst[1]:
            worst = (name, worst_here)
    return GradReport(max_rel_error=worst[1], worst_param=worst[0],
                      per_param=per_param, checked_entries=checked)
