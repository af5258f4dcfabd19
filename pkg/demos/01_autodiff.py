#!/usr/bin/env python3
"""Tape-based reverse-mode differentiation on plain numpy arrays."""

import numpy as np

from disaqa import tensor as T

rng = np.random.default_rng(0)

# Tensors wrap float64 arrays; requires_grad opts a leaf into the tape.
w = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
b = T.Tensor(np.zeros(2), requires_grad=True)
x = T.Tensor(rng.normal(size=(5, 3)))  # inputs stay grad-free

# Ops build the graph as they run; nothing special to declare up front.
h = T.tanh(T.linear(x, w, b))
loss = T.mul(h, h).sum()
print("loss =", loss.item())

loss.backward()
print("dL/dw:\n", w.grad)
print("dL/db:", b.grad)
print("x.grad is", x.grad, "(inputs never accumulate)")

# Central finite differences audit every tracked entry.
report = T.grad_check(lambda: T.mul(T.tanh(T.linear(x, w, b)),
                                    T.tanh(T.linear(x, w, b))).sum(),
                      {"w": w, "b": b}, eps=1e-5)
print(f"grad check: max rel err {report.max_rel_error:.2e} "
      f"over {report.checked_entries} entries "
      f"(worst: {report.worst_param})")
assert report.passed(1e-6)

# no_grad() suspends taping for inference-style passes.
with T.no_grad():
    silent = T.mul(h, 2.0).sum()
print("under no_grad the result has no parents:", silent._parents == ())
