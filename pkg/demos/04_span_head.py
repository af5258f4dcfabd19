#!/usr/bin/env python3
"""Residual Bi-LSTM refinement and constrained span decoding."""

import numpy as np

from disaqa import tensor as T
from disaqa.qa_head import (BiLSTMWeights, PositionHeadWeights, bilstm_encode,
                            decode_span, position_logits, qa_loss)

d = 16
rng = np.random.default_rng(0)
h_bert = T.Tensor(rng.normal(size=(20, d)))

# Zero-initialized gates mean tanh(0) * sigmoid(0) = 0 everywhere, so the
# residual layer starts as a bit-exact identity on the encoder states.
frozen = BiLSTMWeights.init(d, seed=0, zero_init=True)
assert bilstm_encode(h_bert, frozen).data.tobytes() == h_bert.data.tobytes()
print("zero-init Bi-LSTM is an exact identity")

live = BiLSTMWeights.init(d, seed=1)
refined = bilstm_encode(h_bert, live)
print("live Bi-LSTM shifts states by",
      float(np.abs(refined.data - h_bert.data).max()))

heads = PositionHeadWeights.init(d, seed=2)
start_logits, end_logits = position_logits(refined, heads)

# Training loss weights the end boundary 3x by default.
loss = qa_loss(start_logits, end_logits, true_start=8, true_end=12,
               alpha=3.0, context_range=(5, 20))
print("loss at random init:", loss.item(),
      "~ 4 ln 15 =", 4 * np.log(15))

# Decoding searches start <= end < start + cap inside the context zone.
s = np.zeros(20)
e = np.zeros(20)
s[8] = 9.0
e[12] = 9.0
e[3] = 50.0  # a huge end score outside the zone cannot win
pred = decode_span(s, e, context_range=(5, 20), max_answer_len=8)
print(f"decoded span ({pred.start}, {pred.end}), "
      f"log-prob {pred.score:.3f}")
assert (pred.start, pred.end) == (8, 12)
