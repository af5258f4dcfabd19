"""disaqa: extractive QA for disaster bulletins.

Char-level tokenizer, BERT-style post-norm encoder, LoRA adapters on the
attention query/value projections, a residual Bi-LSTM, window-based span
heads, and a numpy reverse-mode autodiff core underneath it all.

Submodules are imported lazily so that the CLI can configure thread limits
before numpy is loaded.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "tokenizer",
    "encoder",
    "lora",
    "qa_head",
    "model",
    "checkpoint",
    "training",
    "metrics",
    "data",
    "cli",
)


def __getattr__(name: str):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
