#!/usr/bin/env python3
"""A toy transformer encoder, plus low-rank adapters and their merge."""

import numpy as np

from disaqa import tensor as T
from disaqa.encoder import EncoderConfig, EncoderWeights, encode_batch
from disaqa.lora import LoRAAdapter, lora_forward, merge

cfg = EncoderConfig.toy(vocab_size=40)
print(f"toy encoder: {cfg.n_layers} layers, d_model {cfg.d_model}, "
      f"{cfg.n_heads} heads")
weights = EncoderWeights.init(cfg, seed=0)

rng = np.random.default_rng(1)
ids = rng.integers(4, 40, size=(2, 12))
seg = np.zeros_like(ids)
mask = np.ones_like(ids)
mask[1, 9:] = 0  # second row ends early; padding is invisible to attention

h = encode_batch(ids, seg, mask, weights)
print("encoded shape", h.shape)
print("per-row layer-norm stats: mean ~0, var ~1 ->",
      float(np.abs(h.data.mean(-1)).max()), float(h.data.var(-1).mean()))

# A fresh adapter starts as an exact identity: B is zero.
base = T.Tensor(rng.normal(size=(cfg.d_model, cfg.d_model)))
adapter = LoRAAdapter.init(cfg.d_model, cfg.d_model, rank=4, alpha=32.0,
                           dropout_rate=0.0, rng=rng, target_id="demo")
x = T.Tensor(rng.normal(size=(3, cfg.d_model)))
print("zero-B delta:",
      float(np.abs(lora_forward(x, base, adapter).data
                   - (x.data @ base.data)).max()))

# After "training" (here: random factors), folding B A into the base
# weight reproduces the adapter path.
adapter.a.data[...] = rng.normal(0.0, 0.1, adapter.a.shape)
adapter.b.data[...] = rng.normal(0.0, 0.1, adapter.b.shape)
merged = merge(base, adapter)
gap = np.abs(lora_forward(x, base, adapter).data
             - x.data @ merged.data).max()
print(f"merged vs adapter-path max gap: {gap:.2e}")
assert gap < 1e-5
