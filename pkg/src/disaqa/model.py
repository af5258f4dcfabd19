"""The composed QA model: encoder -> residual Bi-LSTM -> span heads.

``QAModel`` owns every parameter tensor and exposes them through
``named_params()`` in a fixed order (encoder, adapters, Bi-LSTM, heads),
which checkpointing and the optimizer both rely on.  In LoRA mode the
encoder base is frozen and only adapters, Bi-LSTM, and heads train; with
``use_lora=False`` the whole stack trains (full fine-tune).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import Batch
from .encoder import EncoderConfig, EncoderWeights, encode_batch
from .lora import LoRAAdapter, merge
from .qa_head import (DEFAULT_END_WEIGHT, DEFAULT_MAX_ANSWER_LEN,
                      BiLSTMWeights, PositionHeadWeights, SpanPrediction,
                      bilstm_encode, decode_span, position_logits,
                      qa_loss_batch)
from .tokenizer import DEFAULT_MAX_LEN, Vocab


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a model skeleton (minus the vocab)."""

    encoder: EncoderConfig
    use_lora: bool = True
    lora_rank: int = 4
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    end_weight: float = DEFAULT_END_WEIGHT
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN
    max_len: int = DEFAULT_MAX_LEN

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "ModelConfig":
        return cls(encoder=EncoderConfig.toy(vocab_size), **overrides)

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        return cls(encoder=EncoderConfig.paper_scale(), **overrides)

    def to_json_obj(self) -> dict:
        obj = {k: v for k, v in self.__dict__.items() if k != "encoder"}
        obj["encoder"] = self.encoder.to_json_obj()
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        enc = EncoderConfig.from_json_obj(obj.pop("encoder"))
        return cls(encoder=enc, **obj)


class QAModel:
    """Parameter container plus forward/loss/decode entry points."""

    def __init__(self, config: ModelConfig, vocab: Vocab | None,
                 weights: EncoderWeights,
                 adapters: dict[tuple[int, str], LoRAAdapter],
                 bilstm: BiLSTMWeights, heads: PositionHeadWeights):
        self.config = config
        self.vocab = vocab
        self.weights = weights
        self.adapters = adapters
        self.bilstm = bilstm
        self.heads = heads

    @classmethod
    def build(cls, config: ModelConfig, vocab: Vocab | None = None,
              seed: int = 0, random_init: bool = True) -> "QAModel":
        """Construct with seeded init; RNG draw order is fixed by structure."""
        enc_cfg = config.encoder
        base_trainable = not config.use_lora
        weights = EncoderWeights.init(enc_cfg, seed=seed,
                                      trainable=base_trainable,
                                      random_init=random_init)
        adapters: dict[tuple[int, str], LoRAAdapter] = {}
        if config.use_lora:
            rng = np.random.default_rng(seed + 1)
            for layer in range(enc_cfg.n_layers):
                for proj in ("q", "v"):
                    adapters[(layer, proj)] = LoRAAdapter.init(
                        d_out=enc_cfg.d_model, d_in=enc_cfg.d_model,
                        rank=config.lora_rank, alpha=config.lora_alpha,
                        dropout_rate=config.lora_dropout, rng=rng,
                        target_id=f"{layer}.{proj}")
                    if not random_init:
                        adapters[(layer, proj)].a.data[:] = 0.0
        bilstm = BiLSTMWeights.init(enc_cfg.d_model, seed=seed + 2,
                                    zero_init=not random_init)
        heads = PositionHeadWeights.init(enc_cfg.d_model, seed=seed + 3,
                                         end_weight=config.end_weight,
                                         zero_init=not random_init)
        return cls(config, vocab, weights, adapters, bilstm, heads)

    # -- parameter plumbing --------------------------------------------------

    def named_params(self):
        yield from self.weights.named_params("encoder")
        for (layer, proj) in sorted(self.adapters):
            yield from self.adapters[(layer, proj)].named_params(
                f"lora.{layer}.{proj}")
        yield from self.bilstm.named_params("bilstm")
        yield from self.heads.named_params("head")

    def trainable_params(self) -> list[tuple[str, T.Tensor]]:
        return [(n, p) for n, p in self.named_params() if p.requires_grad]

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()

    # -- forward paths -------------------------------------------------------

    def forward(self, batch: Batch, train: bool = False,
                rng=None) -> tuple[T.Tensor, T.Tensor]:
        """[B, L] start and end logits for a batch."""
        h = encode_batch(batch.token_ids, batch.segment_ids,
                         batch.attention_mask, self.weights,
                         adapters=self.adapters or None, train=train, rng=rng)
        lengths = batch.attention_mask.sum(axis=1)
        h = bilstm_encode(h, self.bilstm, lengths=lengths)
        return position_logits(h, self.heads)

    def loss(self, batch: Batch, train: bool = False, rng=None) -> T.Tensor:
        start_logits, end_logits = self.forward(batch, train=train, rng=rng)
        return qa_loss_batch(start_logits, end_logits, batch.gold_starts,
                             batch.gold_ends, batch.context_ranges,
                             alpha=self.config.end_weight)

    def predict_batch(self, batch: Batch) -> list[SpanPrediction]:
        with T.no_grad():
            start_logits, end_logits = self.forward(batch, train=False)
        return [decode_span(start_logits.data[i], end_logits.data[i],
                            batch.context_ranges[i],
                            self.config.max_answer_len)
                for i in range(batch.size)]

    # -- state management ----------------------------------------------------

    def state_arrays(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_params()
                if not trainable_only or p.requires_grad}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_params())
        for name, arr in state.items():
            if name not in params:
                raise KeyError(f"unknown parameter {name!r}")
            p = params[name]
            if p.data.shape != arr.shape:
                raise ValueError(
                    f"{name}: shape {arr.shape} does not match model {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def merged_copy(self) -> "QAModel":
        """A new model with adapters folded into W_q/W_v and removed."""
        clone = QAModel.build(replace(self.config, use_lora=False),
                              vocab=self.vocab, random_init=False)
        clone.load_state_arrays(
            {n: p.data.copy() for n, p in self.named_params()
             if not n.startswith("lora.")})
        for (layer, proj), adapter in self.adapters.items():
            lw = clone.weights.layers[layer]
            target = lw.wq if proj == "q" else lw.wv
            target.data = merge(target, adapter).data
        return clone
