"""Low-rank adaptation: W = W0 + (alpha/r) * B @ A.

Adapters wrap frozen base matrices; only the factors A and B train.  A is
initialized from N(0, 0.02) and B from zeros, so a fresh adapter is an
exact identity on top of its base.  The alpha/r scaling is applied in the
forward pass (and in ``merge``), never folded into the stored factors.

Activations here follow the row-vector convention ``y = x @ W``; the
stored factor shapes keep the column-convention A:[r, k], B:[d, r] with
k = fan-in and d = fan-out, so the forward delta is x @ A.T @ B.T.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass
class LoRAAdapter:
    """One low-rank adapter over a single base matrix."""

    a: T.Tensor            # [r, k]
    b: T.Tensor            # [d, r]
    rank: int
    alpha: float
    dropout_rate: float
    target_id: str

    def __post_init__(self):
        r_a, k = self.a.shape
        d, r_b = self.b.shape
        if r_a != self.rank or r_b != self.rank:
            raise ValueError(
                f"adapter {self.target_id}: factor ranks ({r_a}, {r_b}) "
                f"disagree with declared rank {self.rank}")
        if self.rank > min(d, k):
            raise ValueError(
                f"adapter {self.target_id}: rank {self.rank} exceeds min{d, k}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, d_out: int, d_in: int, rank: int, alpha: float,
             dropout_rate: float, rng, target_id: str) -> "LoRAAdapter":
        a = T.Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)), requires_grad=True)
        b = T.Tensor(np.zeros((d_out, rank)), requires_grad=True)
        return cls(a=a, b=b, rank=rank, alpha=alpha,
                   dropout_rate=dropout_rate, target_id=target_id)

    def named_params(self, prefix: str):
        yield f"{prefix}.A", self.a
        yield f"{prefix}.B", self.b


def lora_forward(x: T.Tensor, base_w: T.Tensor, adapter: LoRAAdapter,
                 bias: T.Tensor | None = None, train: bool = False,
                 rng=None) -> T.Tensor:
    """base path plus scaled low-rank delta; dropout on the adapter input only.

    The base matrix never receives gradient: it is created with
    requires_grad False and the tape honors that flag.
    """
    k_in = base_w.shape[0]
    if adapter.a.shape[1] != k_in or adapter.b.shape[0] != base_w.shape[1]:
        raise ValueError(
            f"adapter {adapter.target_id} shapes A{adapter.a.shape} / "
            f"B{adapter.b.shape} do not fit base {base_w.shape}")
    base = T.linear(x, base_w, bias)
    dropped = T.dropout(x, adapter.dropout_rate, rng, train)
    delta = T.matmul(T.matmul(dropped, T.transpose(adapter.a)),
                     T.transpose(adapter.b))
    return T.add(base, T.mul(delta, adapter.scale))


def merge(base_w: T.Tensor, adapter: LoRAAdapter) -> T.Tensor:
    """Fold the adapter into its base: W0 + (alpha/r) * (B @ A), as a new tensor."""
    delta = adapter.scale * (adapter.b.data @ adapter.a.data).T
    return T.Tensor(base_w.data + delta)


@dataclass
class ParamBudget:
    """Parameter accounting, split by top-level component."""

    total: int
    trainable: int
    fraction: float
    by_group_total: dict[str, int] = field(default_factory=dict)
    by_group_trainable: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.total < 1:
            raise ValueError("empty model")
        if self.fraction != self.trainable / self.total:
            raise ValueError("fraction must equal trainable/total")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction {self.fraction} outside (0, 1]")

    def to_json(self) -> str:
        return json.dumps({
            "total": self.total,
            "trainable": self.trainable,
            "fraction": self.fraction,
            "by_group_total": self.by_group_total,
            "by_group_trainable": self.by_group_trainable,
        }, sort_keys=True)


def count_params(model, mode: str = "lora") -> ParamBudget:
    """Count parameters over ``model.named_params()``.

    mode "lora": trainable = tensors whose requires_grad flag is set
    (adapters, Bi-LSTM, position heads).  mode "full": everything counts
    as trainable, as in a full fine-tune.
    """
    if mode not in ("lora", "full"):
        raise ValueError(f"mode must be 'lora' or 'full', got {mode!r}")
    total = trainable = 0
    by_total: dict[str, int] = {}
    by_train: dict[str, int] = {}
    for name, p in model.named_params():
        group = name.split(".", 1)[0]
        n = int(p.data.size)
        total += n
        by_total[group] = by_total.get(group, 0) + n
        if mode == "full" or p.requires_grad:
            trainable += n
            by_train[group] = by_train.get(group, 0) + n
    return ParamBudget(total=total, trainable=trainable,
                       fraction=trainable / total,
                       by_group_total=by_total, by_group_trainable=by_train)
