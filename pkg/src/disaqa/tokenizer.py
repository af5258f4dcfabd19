"""Character-level tokenizer with question--context packing.

Texts are split into individual characters, so any codepoint (Latin, kana,
kanji, digits) is a token and span alignment is exact: token index == char
index + a fixed offset.  A question ``q`` and context ``c`` are packed as
``[CLS] q [SEP] c [SEP]`` giving a real length of ``|q| + |c| + 3``; when
the pair exceeds ``max_len`` only the context is truncated, from the right.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

DEFAULT_MAX_LEN = 384


class CapacityError(ValueError):
    """The question alone does not fit the packing budget."""


class UnrepresentableSpanError(ValueError):
    """An answer span falls (partly) outside the packed context window."""


class Vocab:
    """Immutable character vocabulary with four fixed special tokens."""

    def __init__(self, tokens: Iterable[str], min_freq: int = 1):
        tokens = tuple(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the four special tokens")
        self.id_to_token: tuple[str, ...] = tokens
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        self.min_freq = min_freq
        if len(self.token_to_id) != len(tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, text: str) -> list[int]:
        """Map each character to its id, unknown characters to [UNK]."""
        get = self.token_to_id.get
        return [get(ch, UNK) for ch in text]

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of encode for in-vocab text; specials render literally."""
        return "".join(self.id_to_token[i] for i in ids)

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.id_to_token), "min_freq": self.min_freq},
                          ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "Vocab":
        obj = json.loads(payload)
        return cls(obj["tokens"], int(obj["min_freq"]))


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Count characters over ``corpus`` and keep those seen >= min_freq.

    Ordering is deterministic: specials first, then descending frequency,
    frequency ties broken by codepoint.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(text)
    kept = sorted((ch for ch, n in counts.items() if n >= min_freq),
                  key=lambda ch: (-counts[ch], ch))
    return Vocab(SPECIAL_TOKENS + tuple(kept), min_freq)


@dataclass
class PackedInput:
    """One packed ``[CLS] q [SEP] c [SEP]`` sequence, padded to max_len.

    ``context_token_range`` is the half-open interval of packed positions
    holding (possibly truncated) context characters; padding is a suffix.
    """

    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    context_token_range: tuple[int, int]

    @property
    def real_length(self) -> int:
        return int(self.attention_mask.sum())

    @property
    def context_length(self) -> int:
        lo, hi = self.context_token_range
        return hi - lo


def encode_pair(question: str, context: str, vocab: Vocab,
                max_len: int = DEFAULT_MAX_LEN) -> PackedInput:
    """Pack a question--context pair into one fixed-length sequence.

    Truncation removes context characters from the right only; the question
    always survives intact.  Raises CapacityError when even one context
    token cannot fit alongside the full question.
    """
    q_ids = vocab.encode(question)
    c_ids = vocab.encode(context)
    if max_len < len(q_ids) + 4:
        raise CapacityError(
            f"max_len {max_len} cannot fit a {len(q_ids)}-char question "
            f"plus specials and at least one context token"
        )
    keep = min(len(c_ids), max_len - len(q_ids) - 3)
    ctx_offset = len(q_ids) + 2
    ids = [CLS, *q_ids, SEP, *c_ids[:keep], SEP]
    real = len(ids)
    n_pad = max_len - real
    token_ids = np.array(ids + [PAD] * n_pad, dtype=np.int64)
    segment_ids = np.zeros(max_len, dtype=np.int64)
    segment_ids[ctx_offset:real] = 1
    attention_mask = np.zeros(max_len, dtype=np.int64)
    attention_mask[:real] = 1
    return PackedInput(token_ids=token_ids, segment_ids=segment_ids,
                       attention_mask=attention_mask,
                       context_token_range=(ctx_offset, ctx_offset + keep))


def align_span(context: str, char_start: int, char_end: int,
               packed: PackedInput) -> tuple[int, int]:
    """Map a character span [char_start, char_end) to packed token indices.

    Returns (tok_start, tok_end) with an INCLUSIVE end index.  Raises
    UnrepresentableSpanError if any part of the span was truncated away.
    """
    if not 0 <= char_start < char_end <= len(context):
        raise ValueError(
            f"invalid char span [{char_start}, {char_end}) for context of "
            f"length {len(context)}"
        )
    lo, hi = packed.context_token_range
    tok_start = lo + char_start
    tok_end = lo + char_end - 1
    if tok_end >= hi:
        raise UnrepresentableSpanError(
            f"span chars [{char_start}, {char_end}) extend past the "
            f"{hi - lo}-token context window"
        )
    return tok_start, tok_end
