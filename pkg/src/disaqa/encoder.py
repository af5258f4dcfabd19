"""BERT-style post-norm transformer encoder.

Token + learned absolute position + segment embeddings feed ``n_layers``
blocks of multi-head scaled dot-product attention and a GELU FFN, each
sublayer wrapped as ``layer_norm(x + sublayer(x))``.  Padding positions are
excluded by adding a large negative bias to their attention keys before the
softmax, which underflows to an exact zero weight.

Attention cost is O(L^2) in sequence length by construction.  Low-rank
adapters may be attached to the query and value projections of any layer;
the adapter math itself lives in ``lora``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .lora import LoRAAdapter, lora_forward
from .tokenizer import PackedInput

# Finite stand-in for -inf on masked keys: after max subtraction the exp of
# any score this small underflows to exactly 0.0, with no NaN pathway.
MASK_BIAS = -1e9

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    """Structural hyperparameters of the encoder."""

    vocab_size: int
    d_model: int = 768
    n_layers: int = 12
    n_heads: int = 12
    d_ffn: int = 3072
    max_position: int = 512
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ffn",
                     "max_position"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "EncoderConfig":
        """Desk-scale preset: 2 layers, d=64, 4 heads."""
        base = dict(vocab_size=vocab_size, d_model=64, n_layers=2, n_heads=4,
                    d_ffn=256, max_position=512, dropout_rate=0.1)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_scale(cls, **overrides) -> "EncoderConfig":
        """Full-size preset: 12 layers, d=768, 12 heads, 32768-char vocab."""
        base = dict(vocab_size=32768, d_model=768, n_layers=12, n_heads=12,
                    d_ffn=3072, max_position=512, dropout_rate=0.1)
        base.update(overrides)
        return cls(**base)

    def to_json_obj(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)


def _randn(rng, shape, scale=INIT_STD):
    return rng.normal(0.0, scale, size=shape)


@dataclass
class LayerWeights:
    """One transformer block's parameters."""

    wq: T.Tensor
    bq: T.Tensor
    wk: T.Tensor
    bk: T.Tensor
    wv: T.Tensor
    bv: T.Tensor
    wo: T.Tensor
    bo: T.Tensor
    attn_ln_gamma: T.Tensor
    attn_ln_beta: T.Tensor
    w_ffn_in: T.Tensor
    b_ffn_in: T.Tensor
    w_ffn_out: T.Tensor
    b_ffn_out: T.Tensor
    ffn_ln_gamma: T.Tensor
    ffn_ln_beta: T.Tensor

    @classmethod
    def init(cls, config: EncoderConfig, rng, trainable: bool,
             random_init: bool = True) -> "LayerWeights":
        d, f = config.d_model, config.d_ffn

        def w(shape):
            arr = _randn(rng, shape) if random_init else np.zeros(shape)
            return T.Tensor(arr, requires_grad=trainable)

        def zeros(n):
            return T.Tensor(np.zeros(n), requires_grad=trainable)

        def ones(n):
            return T.Tensor(np.ones(n), requires_grad=trainable)

        return cls(
            wq=w((d, d)), bq=zeros(d), wk=w((d, d)), bk=zeros(d),
            wv=w((d, d)), bv=zeros(d), wo=w((d, d)), bo=zeros(d),
            attn_ln_gamma=ones(d), attn_ln_beta=zeros(d),
            w_ffn_in=w((d, f)), b_ffn_in=zeros(f),
            w_ffn_out=w((f, d)), b_ffn_out=zeros(d),
            ffn_ln_gamma=ones(d), ffn_ln_beta=zeros(d),
        )

    def named_params(self, prefix: str):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "attn_ln_gamma", "attn_ln_beta",
                     "w_ffn_in", "b_ffn_in", "w_ffn_out", "b_ffn_out",
                     "ffn_ln_gamma", "ffn_ln_beta"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class EncoderWeights:
    """All encoder parameters; every tensor carries its own trainable flag."""

    config: EncoderConfig
    token_emb: T.Tensor
    pos_emb: T.Tensor
    seg_emb: T.Tensor
    emb_ln_gamma: T.Tensor
    emb_ln_beta: T.Tensor
    layers: list[LayerWeights] = field(default_factory=list)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0, trainable: bool = True,
             random_init: bool = True) -> "EncoderWeights":
        rng = np.random.default_rng(seed)
        d = config.d_model

        def emb(shape):
            arr = _randn(rng, shape) if random_init else np.zeros(shape)
            return T.Tensor(arr, requires_grad=trainable)

        weights = cls(
            config=config,
            token_emb=emb((config.vocab_size, d)),
            pos_emb=emb((config.max_position, d)),
            seg_emb=emb((2, d)),
            emb_ln_gamma=T.Tensor(np.ones(d), requires_grad=trainable),
            emb_ln_beta=T.Tensor(np.zeros(d), requires_grad=trainable),
        )
        for _ in range(config.n_layers):
            weights.layers.append(
                LayerWeights.init(config, rng, trainable, random_init))
        return weights

    def named_params(self, prefix: str = "encoder"):
        yield f"{prefix}.token_emb", self.token_emb
        yield f"{prefix}.pos_emb", self.pos_emb
        yield f"{prefix}.seg_emb", self.seg_emb
        yield f"{prefix}.emb_ln_gamma", self.emb_ln_gamma
        yield f"{prefix}.emb_ln_beta", self.emb_ln_beta
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{i}")


def attention_key_bias(attention_mask: np.ndarray) -> T.Tensor:
    """{0,1} mask -> additive bias on attention scores, broadcast over heads.

    A [B, L] mask hides padding KEYS from every query; a [B, L, L] mask
    constrains each (query, key) pair individually.
    """
    bias = np.where(attention_mask.astype(bool), 0.0, MASK_BIAS)
    if attention_mask.ndim == 2:
        return T.Tensor(bias[:, None, None, :])
    if attention_mask.ndim == 3:
        return T.Tensor(bias[:, None, :, :])
    raise ValueError(f"mask must be [B, L] or [B, L, L], got {attention_mask.shape}")


def multi_head_attention(h: T.Tensor, layer: LayerWeights, mask: np.ndarray,
                         n_heads: int, adapters: dict[str, LoRAAdapter] | None = None,
                         dropout_rate: float = 0.0, train: bool = False,
                         rng=None) -> T.Tensor:
    """Scaled dot-product attention over a batch of sequences.

    ``h`` is [B, L, d]; ``mask`` is the [B, L] padding mask applied to KEYS.
    ``adapters`` may carry "q" and/or "v" low-rank adapters for this layer.
    Returns the projected attention output (pre-residual, pre-norm).
    """
    adapters = adapters or {}
    b, l, d = h.shape
    if mask.shape not in ((b, l), (b, l, l)):
        raise ValueError(f"mask shape {mask.shape} does not match input {(b, l)}")
    dh = d // n_heads

    def project(w, bias, name):
        if name in adapters:
            return lora_forward(h, w, adapters[name], bias=bias, train=train, rng=rng)
        return T.linear(h, w, bias)

    def split_heads(x):
        return T.swapaxes(x.reshape(b, l, n_heads, dh), 1, 2)  # [B, H, L, dh]

    q = split_heads(project(layer.wq, layer.bq, "q"))
    k = split_heads(T.linear(h, layer.wk, layer.bk))
    v = split_heads(project(layer.wv, layer.bv, "v"))

    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))  # [B, H, L, L]
    scores = T.add(scores, attention_key_bias(mask))
    probs = T.softmax(scores, axis=-1)
    probs = T.dropout(probs, dropout_rate, rng, train)
    ctx = T.matmul(probs, v)                                        # [B, H, L, dh]
    ctx = T.swapaxes(ctx, 1, 2).reshape(b, l, d)
    return T.linear(ctx, layer.wo, layer.bo)


def _ffn(h: T.Tensor, layer: LayerWeights) -> T.Tensor:
    return T.linear(T.gelu(T.linear(h, layer.w_ffn_in, layer.b_ffn_in)),
                    layer.w_ffn_out, layer.b_ffn_out)


def encode_batch(token_ids: np.ndarray, segment_ids: np.ndarray,
                 attention_mask: np.ndarray, weights: EncoderWeights,
                 adapters: dict[tuple[int, str], LoRAAdapter] | None = None,
                 train: bool = False, rng=None) -> T.Tensor:
    """Run the full encoder over [B, L] id arrays, returning [B, L, d]."""
    cfg = weights.config
    b, l = token_ids.shape
    if l > cfg.max_position:
        raise ValueError(f"sequence length {l} exceeds max_position {cfg.max_position}")
    rate = cfg.dropout_rate

    x = T.add(T.add(T.embedding(weights.token_emb, token_ids),
                    T.embedding(weights.pos_emb, np.arange(l))),
              T.embedding(weights.seg_emb, segment_ids))
    x = T.layer_norm(x, weights.emb_ln_gamma, weights.emb_ln_beta)
    x = T.dropout(x, rate, rng, train)

    for i, layer in enumerate(weights.layers):
        layer_adapters = None
        if adapters:
            layer_adapters = {proj: a for (idx, proj), a in adapters.items() if idx == i}
        attn = multi_head_attention(x, layer, attention_mask, cfg.n_heads,
                                    adapters=layer_adapters, dropout_rate=rate,
                                    train=train, rng=rng)
        attn = T.dropout(attn, rate, rng, train)
        x = T.layer_norm(T.add(x, attn), layer.attn_ln_gamma, layer.attn_ln_beta)
        ffn = T.dropout(_ffn(x, layer), rate, rng, train)
        x = T.layer_norm(T.add(x, ffn), layer.ffn_ln_gamma, layer.ffn_ln_beta)
    return x


def encode(packed: PackedInput, weights: EncoderWeights,
           adapters: dict[tuple[int, str], LoRAAdapter] | None = None,
           train: bool = False, rng=None) -> T.Tensor:
    """Encode a single PackedInput, returning [L, d_model] states."""
    out = encode_batch(packed.token_ids[None, :], packed.segment_ids[None, :],
                       packed.attention_mask[None, :], weights,
                       adapters=adapters, train=train, rng=rng)
    return out[0]
