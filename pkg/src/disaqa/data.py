"""Dataset model, JSONL I/O, synthetic disaster-QA generation, batching.

The wire format is UTF-8 JSONL with one record per line carrying exactly
the QARecord field names.  The synthetic generator fills parameterized
bulletin templates (earthquake, flood, typhoon, volcanic) whose slot
values become the answers; offsets are tracked during construction so the
span invariant holds by construction for every seed.
"""

from __future__ import annotations

import json
import logging
import random
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import (CapacityError, UnrepresentableSpanError, Vocab,
                        align_span, encode_pair)

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised for malformed dataset files or unusable batching input."""


@dataclass(frozen=True)
class QARecord:
    """One extractive QA example over a disaster bulletin."""

    id: str
    question: str
    context: str
    answer_text: str
    answer_start_char: int

    def __post_init__(self):
        end = self.answer_start_char + len(self.answer_text)
        if not self.answer_text:
            raise DatasetError(f"record {self.id!r}: empty answer_text")
        if self.answer_start_char < 0 or end > len(self.context):
            raise DatasetError(
                f"record {self.id!r}: answer span [{self.answer_start_char}, {end}) "
                f"outside context of length {len(self.context)}"
            )
        if self.context[self.answer_start_char:end] != self.answer_text:
            raise DatasetError(
                f"record {self.id!r}: answer_text does not match the context slice "
                f"at char {self.answer_start_char}"
            )

    @property
    def answer_end_char(self) -> int:
        return self.answer_start_char + len(self.answer_text)

    def to_json_obj(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "context": self.context,
            "answer_text": self.answer_text,
            "answer_start_char": self.answer_start_char,
        }


def save_dataset(records: Iterable[QARecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_obj(), ensure_ascii=False) + "\n")


def load_dataset(path: str | Path) -> list[QARecord]:
    """Parse and validate a JSONL dataset; empty files load as []. """
    records: list[QARecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed JSON ({exc})") from exc
            try:
                records.append(QARecord(
                    id=str(obj["id"]),
                    question=obj["question"],
                    context=obj["context"],
                    answer_text=obj["answer_text"],
                    answer_start_char=int(obj["answer_start_char"]),
                ))
            except KeyError as exc:
                raise DatasetError(f"{path}: line {lineno}: missing field {exc}") from exc
    return records


# -- synthetic generator -----------------------------------------------------

_POOLS: dict[str, tuple[str, ...]] = {
    "location": ("Sendai", "Kobe", "Naha", "Kumamoto", "Niigata",
                 "central Osaka", "the Izu islands", "仙台市"),
    "volcano": ("Mount Aso", "Sakurajima", "Mount Ontake", "Kirishima"),
    "time": ("03:12", "06:30", "14:55", "21:40", "noon", "dawn"),
    "magnitude": ("4.9", "5.8", "6.1", "7.3", "8.0"),
    "flood_level": ("2", "3", "4", "5"),
    "alert_level": ("2", "3", "4", "5"),
    "category": ("3", "4", "5"),
    "wind": ("138 km/h", "162 km/h", "185 km/h"),
    "name": ("Hagibis", "Jebi", "Maysak", "Lan"),
    "instruction": ("evacuate immediately", "move to higher ground",
                    "stay indoors", "avoid the coast", "follow official guidance"),
}


@dataclass(frozen=True)
class Template:
    """A bulletin pattern; every ``{slot}`` is answerable via ``questions``."""

    disaster: str
    context: str
    questions: tuple[tuple[str, tuple[str, ...]], ...]


DISASTER_TEMPLATES: tuple[Template, ...] = (
    Template(
        "earthquake",
        "A magnitude {magnitude} quake hit {location} at {time}. Residents should {instruction}.",
        (
            ("magnitude", ("What was the magnitude of the quake?", "How strong was the quake?")),
            ("location", ("Where did the quake hit?", "Which area did the quake hit?")),
            ("time", ("When did the quake hit?", "What time did the quake hit?")),
            ("instruction", ("What should residents do?", "What action should residents take?")),
        ),
    ),
    Template(
        "earthquake",
        "Tremors shook {location} at {time}. The quake measured {magnitude}. Please {instruction}.",
        (
            ("location", ("Where were tremors felt?", "Which area was shaken?")),
            ("time", ("When were the tremors felt?",)),
            ("magnitude", ("What did the quake measure?", "How strong were the tremors?")),
            ("instruction", ("What are people asked to do?",)),
        ),
    ),
    Template(
        "flood",
        "Flood warning level {flood_level} was issued for {location} at {time}. Residents must {instruction}.",
        (
            ("flood_level", ("What flood warning level was issued?", "Which warning level was declared?")),
            ("location", ("Where was the flood warning issued?",)),
            ("time", ("When was the flood warning issued?",)),
            ("instruction", ("What must residents do?",)),
        ),
    ),
    Template(
        "flood",
        "Heavy rain flooded {location} by {time}. The alert level is {flood_level}. People should {instruction}.",
        (
            ("location", ("Which area was flooded?", "Where did flooding occur?")),
            ("time", ("By when was the area flooded?",)),
            ("flood_level", ("What is the alert level?", "Which alert level applies?")),
            ("instruction", ("What should people do?",)),
        ),
    ),
    Template(
        "typhoon",
        "Typhoon {name} will reach {location} by {time} with winds of {wind}. Residents should {instruction}.",
        (
            ("name", ("What is the typhoon called?", "Which typhoon is approaching?")),
            ("location", ("Where will the typhoon reach?",)),
            ("time", ("When will the typhoon arrive?",)),
            ("wind", ("How strong are the winds?", "What wind speed is expected?")),
            ("instruction", ("What should residents do?",)),
        ),
    ),
    Template(
        "typhoon",
        "A category {category} typhoon is heading for {location}. Landfall is expected at {time}. Please {instruction}.",
        (
            ("category", ("What category is the typhoon?",)),
            ("location", ("Where is the typhoon heading?",)),
            ("time", ("When is landfall expected?",)),
            ("instruction", ("What are people asked to do?",)),
        ),
    ),
    Template(
        "volcanic",
        "Volcanic alert level {alert_level} was declared for {volcano} at {time}. Climbers must {instruction}.",
        (
            ("alert_level", ("What volcanic alert level was declared?", "Which alert level was declared?")),
            ("volcano", ("Where was the volcanic alert declared?",)),
            ("time", ("When was the alert declared?",)),
            ("instruction", ("What must climbers do?",)),
        ),
    ),
    Template(
        "volcanic",
        "{volcano} erupted at {time} and ash is falling nearby. The alert level is now {alert_level}. People should {instruction}.",
        (
            ("volcano", ("Which volcano erupted?", "What erupted?")),
            ("time", ("When did the eruption start?", "When did it erupt?")),
            ("alert_level", ("What is the alert level now?",)),
            ("instruction", ("What should people do?",)),
        ),
    ),
)


def _fill(template: str, values: dict[str, str]) -> tuple[str, dict[str, tuple[int, str]]]:
    """Render a format string, recording each slot's char offset."""
    parts: list[str] = []
    pos = 0
    spans: dict[str, tuple[int, str]] = {}
    for literal, field, _spec, _conv in string.Formatter().parse(template):
        parts.append(literal)
        pos += len(literal)
        if field is not None:
            value = values[field]
            spans[field] = (pos, value)
            parts.append(value)
            pos += len(value)
    return "".join(parts), spans


def generate_synthetic(n: int, seed: int = 0,
                       template_set: Sequence[Template] = DISASTER_TEMPLATES
                       ) -> list[QARecord]:
    """Deterministically generate ``n`` records, cycling over templates."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = random.Random(seed)
    records: list[QARecord] = []
    for i in range(n):
        tpl = template_set[i % len(template_set)]
        values = {slot: rng.choice(_POOLS[slot])
                  for slot in _template_slots(tpl.context)}
        context, spans = _fill(tpl.context, values)
        slot, phrasings = tpl.questions[rng.randrange(len(tpl.questions))]
        question = phrasings[rng.randrange(len(phrasings))]
        start, answer = spans[slot]
        records.append(QARecord(
            id=f"synth-{i:05d}",
            question=question,
            context=context,
            answer_text=answer,
            answer_start_char=start,
        ))
    return records


def _template_slots(template: str) -> list[str]:
    return [field for _, field, _, _ in string.Formatter().parse(template)
            if field is not None]


# -- splitting and batching --------------------------------------------------


def split_dataset(records: Sequence[QARecord], val_fraction: float = 0.1,
                  seed: int = 0) -> tuple[list[QARecord], list[QARecord]]:
    """Seeded shuffle, then a disjoint train/validation split."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    order = list(records)
    random.Random(seed).shuffle(order)
    n_val = int(len(order) * val_fraction)
    return order[n_val:], order[:n_val]


@dataclass
class Batch:
    """Packed arrays for one micro-batch, padded to the batch's max length."""

    token_ids: np.ndarray        # [B, L] int64
    segment_ids: np.ndarray      # [B, L] int64
    attention_mask: np.ndarray   # [B, L] int64
    context_ranges: list[tuple[int, int]]
    gold_starts: np.ndarray      # [B] int64
    gold_ends: np.ndarray        # [B] int64 (inclusive)
    ids: list[str]

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]


def make_batches(records: Sequence[QARecord], vocab: Vocab, max_len: int,
                 micro_batch: int, shuffle_seed: int | None = None
                 ) -> tuple[list[Batch], int]:
    """Encode, align, and group records into micro-batches.

    Records whose answer falls in the truncated context region (or whose
    question alone exceeds the budget) are dropped; the count is returned
    and logged.  ``shuffle_seed=None`` preserves input order.
    """
    if micro_batch < 1:
        raise ValueError(f"micro_batch must be >= 1, got {micro_batch}")
    order = list(records)
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(order)

    encoded = []
    dropped = 0
    for rec in order:
        try:
            packed = encode_pair(rec.question, rec.context, vocab, max_len)
            span = align_span(rec.context, rec.answer_start_char,
                              rec.answer_end_char, packed)
        except (CapacityError, UnrepresentableSpanError):
            dropped += 1
            continue
        encoded.append((rec, packed, span))
    if dropped:
        log.info("dropped %d of %d records not representable at max_len=%d",
                 dropped, len(order), max_len)
    if not encoded:
        raise DatasetError(f"all {len(order)} records dropped at max_len={max_len}")

    batches = []
    for i in range(0, len(encoded), micro_batch):
        chunk = encoded[i:i + micro_batch]
        width = max(p.real_length for _, p, _ in chunk)
        batches.append(Batch(
            token_ids=np.stack([p.token_ids[:width] for _, p, _ in chunk]),
            segment_ids=np.stack([p.segment_ids[:width] for _, p, _ in chunk]),
            attention_mask=np.stack([p.attention_mask[:width] for _, p, _ in chunk]),
            context_ranges=[p.context_token_range for _, p, _ in chunk],
            gold_starts=np.array([s for _, _, (s, _) in chunk], dtype=np.int64),
            gold_ends=np.array([e for _, _, (_, e) in chunk], dtype=np.int64),
            ids=[r.id for r, _, _ in chunk],
        ))
    return batches, dropped
