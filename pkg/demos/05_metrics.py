#!/usr/bin/env python3
"""The evaluation suite: position accuracy, span F1, EM, corpus BLEU."""

import numpy as np

from disaqa.metrics import (bleu, compute_report, exact_match,
                            position_accuracy, span_f1)

# Spans are (start, end) token intervals with inclusive ends.
preds = [(2, 4), (7, 9), (1, 1), (5, 8)]
golds = [(2, 4), (7, 8), (3, 4), (5, 8)]

s_acc, e_acc = position_accuracy(preds, golds)
print(f"start acc {s_acc}, end acc {e_acc}")

# Overlap is counted over token positions.
print("F1 {2,3,4} vs {3,4,5}:", span_f1((2, 4), (3, 5)), "= 2/3")
print("disjoint F1:", span_f1((0, 1), (5, 6)))
print("EM:", exact_match(preds, golds))

# BLEU pools clipped n-gram counts over the corpus; short candidates cap
# the usable order, and the brevity penalty punishes short answers.
ref = list("toky")
cand = list("to")
print("half-length candidate:", bleu([cand], [ref]),
      "= e^-1 =", float(np.exp(-1)))
print("perfect candidate:", bleu([list("sendai")], [list("sendai")]))
print("no shared 4-gram:", bleu([list("abcdef")], [list("uvwxyz")]))

report = compute_report(preds, golds)
print("bundled:", report.to_json())
