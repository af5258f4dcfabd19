#!/usr/bin/env python3
"""Character vocabulary, question/context packing, span alignment."""

from disaqa.tokenizer import align_span, build_vocab, encode_pair

corpus = [
    "A magnitude 7.3 quake hit Sendai at 03:12.",
    "Flood warning level 4 was issued for Naha.",
]
vocab = build_vocab(corpus)
print(f"vocab of {len(vocab)} entries; first ten:",
      vocab.id_to_token[:10])  # specials come first, then by frequency

question = "Where did the quake hit?"
context = corpus[0]
packed = encode_pair(question, context, vocab, max_len=96)

# Layout is [CLS] question [SEP] context [SEP] padding.
print("token ids:", packed.token_ids[:12], "...")
print("segments :", packed.segment_ids[:12], "...")
print("real length", packed.real_length, "of", len(packed.token_ids))
lo, hi = packed.context_token_range
print(f"context occupies tokens [{lo}, {hi})")

# A character span in the context maps to token positions directly.
start = context.index("Sendai")
tok_span = align_span(context, start, start + len("Sendai"), packed)
print("answer tokens:", tok_span)
chars = [vocab.id_to_token[i] for i in
         packed.token_ids[tok_span[0]:tok_span[1] + 1]]
print("recovered text:", "".join(chars))
assert "".join(chars) == "Sendai"
