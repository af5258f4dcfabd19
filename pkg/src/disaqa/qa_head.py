"""Residual Bi-LSTM and boundary-aware span heads.

The Bi-LSTM runs over encoder states with per-direction hidden size
d_model/2 so the concatenated [forward; backward] output has width d_model
and adds residually onto its input.  (The alternative, full-width
directions plus a projection, was considered and rejected — the direct
residual needs no extra parameters and makes the zero-init identity
exact.)  The start and end heads score each position from a width-3 window
of its neighbors through separate tanh MLPs; the end head's loss term is
weighted by alpha (default 3.0) at training time only — alpha cancels in
the decode argmax, so inference never sees it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

DEFAULT_END_WEIGHT = 3.0
DEFAULT_MAX_ANSWER_LEN = 64


@dataclass
class LSTMDirection:
    """Gate parameters of one direction; columns ordered i | f | g | o."""

    wx: T.Tensor   # [d_in, 4*dh]
    wh: T.Tensor   # [dh, 4*dh]
    bias: T.Tensor  # [4*dh]

    @classmethod
    def init(cls, d_in: int, dh: int, rng, trainable: bool = True,
             zero_init: bool = False) -> "LSTMDirection":
        def w(shape):
            arr = np.zeros(shape) if zero_init else rng.normal(0.0, 0.02, shape)
            return T.Tensor(arr, requires_grad=trainable)

        return cls(wx=w((d_in, 4 * dh)), wh=w((dh, 4 * dh)),
                   bias=T.Tensor(np.zeros(4 * dh), requires_grad=trainable))

    def named_params(self, prefix: str):
        yield f"{prefix}.wx", self.wx
        yield f"{prefix}.wh", self.wh
        yield f"{prefix}.bias", self.bias


@dataclass
class BiLSTMWeights:
    """Both directions; d_lstm == d_model // 2 enables the residual add."""

    fwd: LSTMDirection
    bwd: LSTMDirection
    d_lstm: int

    @classmethod
    def init(cls, d_model: int, seed: int = 0, trainable: bool = True,
             zero_init: bool = False) -> "BiLSTMWeights":
        if d_model % 2 != 0:
            raise ValueError(f"d_model {d_model} must be even for d/2 directions")
        rng = np.random.default_rng(seed)
        dh = d_model // 2
        return cls(fwd=LSTMDirection.init(d_model, dh, rng, trainable, zero_init),
                   bwd=LSTMDirection.init(d_model, dh, rng, trainable, zero_init),
                   d_lstm=dh)

    def named_params(self, prefix: str = "bilstm"):
        yield from self.fwd.named_params(f"{prefix}.fwd")
        yield from self.bwd.named_params(f"{prefix}.bwd")


def _run_direction(x: T.Tensor, cell: LSTMDirection) -> T.Tensor:
    """Standard LSTM recurrence over [B, L, d] input; returns [B, L, dh].

    The input and recurrent matrices are stacked once so each step costs a
    single concat + matmul, and the gate nonlinearities run through the
    fused cell/hidden ops to keep the tape shallow.
    """
    b, l, _ = x.shape
    dh = cell.wh.shape[0]
    w = T.concat([cell.wx, cell.wh], axis=0)  # [d + dh, 4*dh]
    h = T.Tensor(np.zeros((b, dh)))
    c = T.Tensor(np.zeros((b, dh)))
    outs = []
    for t in range(l):
        z = T.linear(T.concat([x[:, t], h], axis=1), w, cell.bias)
        c = T.lstm_cell_update(z, c, dh)
        h = T.lstm_hidden(z, c, dh)
        outs.append(h.reshape(b, 1, dh))
    return T.concat(outs, axis=1)


def _reversal_index(b: int, l: int, lengths: np.ndarray | None) -> np.ndarray:
    """Per-row time reversal that leaves padding positions in place."""
    if lengths is None:
        lengths = np.full(b, l, dtype=np.int64)
    idx = np.tile(np.arange(l), (b, 1))
    for row, n in enumerate(lengths):
        idx[row, :n] = np.arange(n - 1, -1, -1)
    return idx


def bilstm_encode(h_bert: T.Tensor, weights: BiLSTMWeights,
                  lengths: np.ndarray | None = None) -> T.Tensor:
    """Residual Bi-LSTM: h_bert + [forward pass; backward pass].

    Accepts [L, d] or [B, L, d].  ``lengths`` (per-row real lengths) keeps
    the backward direction from starting inside padding; padding rows of
    the OUTPUT are still garbage and must stay masked downstream.
    """
    squeeze = h_bert.ndim == 2
    if squeeze:
        h_bert = h_bert.reshape(1, *h_bert.shape)
    b, l, d = h_bert.shape
    if 2 * weights.d_lstm != d:
        raise ValueError(f"Bi-LSTM width {2 * weights.d_lstm} does not match d_model {d}")

    fwd = _run_direction(h_bert, weights.fwd)
    rev = _reversal_index(b, l, lengths)
    bwd_rev = _run_direction(T.gather_time(h_bert, rev), weights.bwd)
    bwd = T.gather_time(bwd_rev, rev)

    out = T.add(h_bert, T.concat([fwd, bwd], axis=2))
    return out[0] if squeeze else out


@dataclass
class PositionHead:
    """One boundary scorer: window concat -> tanh hidden -> scalar logit."""

    w1: T.Tensor   # [3*d, d]
    b1: T.Tensor   # [d]
    w2: T.Tensor   # [d, 1]
    b2: T.Tensor   # [1]

    @classmethod
    def init(cls, d_model: int, rng, trainable: bool = True,
             zero_init: bool = False) -> "PositionHead":
        def w(shape):
            arr = np.zeros(shape) if zero_init else rng.normal(0.0, 0.02, shape)
            return T.Tensor(arr, requires_grad=trainable)

        return cls(w1=w((3 * d_model, d_model)),
                   b1=T.Tensor(np.zeros(d_model), requires_grad=trainable),
                   w2=w((d_model, 1)),
                   b2=T.Tensor(np.zeros(1), requires_grad=trainable))

    def named_params(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class PositionHeadWeights:
    """Separate start and end scorers plus the end-loss weight alpha."""

    start: PositionHead
    end: PositionHead
    end_weight: float = DEFAULT_END_WEIGHT

    def __post_init__(self):
        if self.end_weight <= 0:
            raise ValueError(f"end_weight must be positive, got {self.end_weight}")

    @classmethod
    def init(cls, d_model: int, seed: int = 0, trainable: bool = True,
             end_weight: float = DEFAULT_END_WEIGHT,
             zero_init: bool = False) -> "PositionHeadWeights":
        rng = np.random.default_rng(seed)
        return cls(start=PositionHead.init(d_model, rng, trainable, zero_init),
                   end=PositionHead.init(d_model, rng, trainable, zero_init),
                   end_weight=end_weight)

    def named_params(self, prefix: str = "head"):
        yield from self.start.named_params(f"{prefix}.start")
        yield from self.end.named_params(f"{prefix}.end")


def _window_features(h: T.Tensor) -> T.Tensor:
    """concat(h_{i-1}, h_i, h_{i+1}) per position, zero-padded at the ends."""
    b, l, d = h.shape
    pad = T.Tensor(np.zeros((b, 1, d)))
    prev = T.concat([pad, h[:, :l - 1]], axis=1) if l > 1 else pad
    nxt = T.concat([h[:, 1:], pad], axis=1) if l > 1 else pad
    return T.concat([prev, h, nxt], axis=2)


def position_logits(h: T.Tensor, weights: PositionHeadWeights
                    ) -> tuple[T.Tensor, T.Tensor]:
    """Per-position start and end logits from width-3 windows.

    Accepts [L, d] or [B, L, d]; returns logits of shape [L] or [B, L].
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    b, l, _ = h.shape
    win = _window_features(h)

    def score(head: PositionHead) -> T.Tensor:
        hid = T.tanh(T.linear(win, head.w1, head.b1))
        return T.linear(hid, head.w2, head.b2).reshape(b, l)

    s, e = score(weights.start), score(weights.end)
    return (s[0], e[0]) if squeeze else (s, e)


def _zone_bias(l: int, context_range: tuple[int, int] | None) -> np.ndarray | None:
    if context_range is None:
        return None
    lo, hi = context_range
    if not 0 <= lo < hi <= l:
        raise ValueError(f"context range {context_range} invalid for length {l}")
    bias = np.full(l, -1e9)
    bias[lo:hi] = 0.0
    return bias


def _check_in_zone(idx: int, l: int, context_range: tuple[int, int] | None,
                   what: str) -> None:
    lo, hi = (0, l) if context_range is None else context_range
    if not lo <= idx < hi:
        raise IndexError(f"{what} index {idx} outside context zone [{lo}, {hi})")


def qa_loss(start_logits: T.Tensor, end_logits: T.Tensor, true_start: int,
            true_end: int, alpha: float = DEFAULT_END_WEIGHT,
            context_range: tuple[int, int] | None = None) -> T.Tensor:
    """CE(start) + alpha * CE(end) for one example's logit vectors.

    With ``context_range`` given, probabilities are normalized over the
    context zone only (positions outside get a -1e9 bias).
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    (l,) = start_logits.shape
    _check_in_zone(true_start, l, context_range, "start")
    _check_in_zone(true_end, l, context_range, "end")
    bias = _zone_bias(l, context_range)
    if bias is not None:
        start_logits = T.add(start_logits, T.Tensor(bias))
        end_logits = T.add(end_logits, T.Tensor(bias))
    return T.add(T.cross_entropy(start_logits, true_start),
                 T.mul(T.cross_entropy(end_logits, true_end), alpha))


def qa_loss_batch(start_logits: T.Tensor, end_logits: T.Tensor,
                  true_starts: np.ndarray, true_ends: np.ndarray,
                  context_ranges: list[tuple[int, int]],
                  alpha: float = DEFAULT_END_WEIGHT) -> T.Tensor:
    """Mean over examples of CE(start) + alpha * CE(end), zone-masked."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    b, l = start_logits.shape
    bias = np.full((b, l), -1e9)
    for row, (lo, hi) in enumerate(context_ranges):
        if not 0 <= lo < hi <= l:
            raise ValueError(f"context range {(lo, hi)} invalid for length {l}")
        bias[row, lo:hi] = 0.0
        _check_in_zone(int(true_starts[row]), l, (lo, hi), "start")
        _check_in_zone(int(true_ends[row]), l, (lo, hi), "end")
    bias_t = T.Tensor(bias)
    ce_s = T.cross_entropy_rows(T.add(start_logits, bias_t), true_starts)
    ce_e = T.cross_entropy_rows(T.add(end_logits, bias_t), true_ends)
    return T.add(ce_s.mean(), T.mul(ce_e.mean(), alpha))


@dataclass(frozen=True)
class SpanPrediction:
    """A decoded answer span (inclusive end) with its joint log-probability."""

    start: int
    end: int
    score: float

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"span start {self.start} after end {self.end}")


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max()
    s = x - m
    return s - np.log(np.exp(s).sum())


def decode_span(start_logits, end_logits, context_range: tuple[int, int],
                max_answer_len: int = DEFAULT_MAX_ANSWER_LEN) -> SpanPrediction:
    """Best (s, e) with s <= e < s + max_answer_len inside the context zone.

    Probabilities are normalized over the zone only.  Ties break toward
    the smallest start, then the smallest end: the candidate matrix is
    scanned in row-major (s, e) order and argmax returns the first max.
    """
    if max_answer_len < 1:
        raise ValueError(f"max_answer_len must be >= 1, got {max_answer_len}")
    s_data = start_logits.data if isinstance(start_logits, T.Tensor) else np.asarray(start_logits)
    e_data = end_logits.data if isinstance(end_logits, T.Tensor) else np.asarray(end_logits)
    lo, hi = context_range
    n = hi - lo
    if n <= 0 or lo < 0 or hi > s_data.shape[-1]:
        raise ValueError(f"context range {context_range} empty or out of bounds")

    s_lp = _log_softmax(s_data[lo:hi])
    e_lp = _log_softmax(e_data[lo:hi])
    scores = s_lp[:, None] + e_lp[None, :]
    offsets = np.arange(n)
    gap = offsets[None, :] - offsets[:, None]          # e - s
    scores = np.where((gap >= 0) & (gap < max_answer_len), scores, -np.inf)
    flat = int(np.argmax(scores))
    i, j = divmod(flat, n)
    return SpanPrediction(start=lo + i, end=lo + j, score=float(scores[i, j]))
