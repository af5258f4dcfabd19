"""AdamW training loop: parameter groups, accumulation, early stopping.

Two learning rates: adapters (and, in a full fine-tune, the encoder base)
train at ``lr_encoder_side`` while the Bi-LSTM and position heads train at
``lr_heads``.  Gradients accumulate over ``accumulation_steps`` micro
batches before each optimizer step, so the effective batch is their
product.  Validation runs once per epoch; training stops after
``early_stop_patience`` epochs without an end-position-accuracy
improvement and the best weights are restored.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import save as save_checkpoint
from .data import QARecord, make_batches
from .metrics import MetricsReport, compute_report
from .model import QAModel


class TrainingError(Exception):
    """Aborted optimization: bad config or non-finite gradients."""


@dataclass(frozen=True)
class TrainConfig:
    lr_encoder_side: float = 2e-5
    lr_heads: float = 1e-4
    micro_batch: int = 16
    accumulation_steps: int = 4
    epochs: int = 8
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    early_stop_patience: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.lr_encoder_side <= 0 or self.lr_heads <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.micro_batch, self.accumulation_steps, self.epochs,
               self.early_stop_patience) < 1:
            raise ValueError("counts must be >= 1")
        if self.weight_decay < 0:
            raise ValueError(f"negative weight_decay {self.weight_decay}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas {self.betas} outside [0, 1)")
        if self.eps_adam <= 0:
            raise ValueError("eps_adam must be positive")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation_steps

    def to_json_obj(self) -> dict:
        obj = dict(self.__dict__)
        obj["betas"] = list(self.betas)
        return obj


def load_train_config(path: str | Path) -> TrainConfig:
    """Read a JSON or TOML file whose keys mirror TrainConfig exactly."""
    path = Path(path)
    if path.suffix == ".json":
        obj = json.loads(path.read_text(encoding="utf-8"))
    elif path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        obj = tomllib.loads(path.read_text(encoding="utf-8"))
    else:
        raise TrainingError(
            f"config {path} must be .json or .toml, got {path.suffix!r}")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(obj) - known
    if unknown:
        raise TrainingError(
            f"config {path}: unknown keys {sorted(unknown)}; "
            f"valid keys are {sorted(known)}")
    if "betas" in obj:
        obj["betas"] = tuple(obj["betas"])
    return TrainConfig(**obj)


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups.

    Decay is skipped for every parameter of rank <= 1, which in this
    model is exactly the biases and layer-norm scales/offsets.
    """

    def __init__(self, named_params, lr_for, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.params = list(named_params)
        self.lr_for = lr_for
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise TrainingError(
                    f"non-finite gradient in {name!r} at step {self.t}: "
                    f"{bad} bad entries, |g|_max = {np.abs(g).max()}")
            lr = self.lr_for(name)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.data.ndim > 1:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def lr_assignment(cfg: TrainConfig):
    """Name -> learning rate: encoder-side tensors vs heads."""
    def lr_for(name: str) -> float:
        if name.startswith(("lora.", "encoder.")):
            return cfg.lr_encoder_side
        return cfg.lr_heads
    return lr_for


@dataclass
class TrainingReport:
    """What a fit() run did, epoch by epoch."""

    epoch_train_losses: list[float] = field(default_factory=list)
    epoch_val_metrics: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_checkpoint: str | None = None
    optimizer_steps: int = 0
    dropped_records: int = 0
    wall_time_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def evaluate_model(model: QAModel, records, micro_batch: int = 16
                   ) -> MetricsReport:
    """Greedy span predictions vs gold over ``records``, all metrics."""
    batches, _ = make_batches(records, model.vocab, model.config.max_len,
                              micro_batch)
    preds, golds, cands, refs = [], [], [], []
    for batch in batches:
        for i, pred in enumerate(model.predict_batch(batch)):
            row = batch.token_ids[i]
            gs, ge = int(batch.gold_starts[i]), int(batch.gold_ends[i])
            preds.append(pred)
            golds.append((gs, ge))
            cands.append([int(t) for t in row[pred.start:pred.end + 1]])
            refs.append([int(t) for t in row[gs:ge + 1]])
    return compute_report(preds, golds, cands, refs)


def _windows(batches, width):
    for i in range(0, len(batches), width):
        yield batches[i:i + width]


def fit(model: QAModel, train_records: list[QARecord],
        val_records: list[QARecord], cfg: TrainConfig,
        ckpt_dir: str | Path | None = None, eval_fn=None,
        log=None) -> TrainingReport:
    """Run the full optimization loop; model ends at its best-epoch weights."""
    if not train_records:
        raise TrainingError("empty training set")
    if not val_records:
        raise TrainingError("empty validation set")
    eval_fn = eval_fn or (lambda m: evaluate_model(m, val_records,
                                                   cfg.micro_batch))
    log = log or (lambda msg: print(msg, file=sys.stderr))
    optimizer = AdamW(model.trainable_params(), lr_assignment(cfg),
                      betas=cfg.betas, eps=cfg.eps_adam,
                      weight_decay=cfg.weight_decay)
    report = TrainingReport()
    best_metric = -np.inf
    best_state: dict[str, np.ndarray] | None = None
    stale_epochs = 0
    t0 = time.monotonic()

    for epoch in range(1, cfg.epochs + 1):
        batches, dropped = make_batches(
            train_records, model.vocab, model.config.max_len,
            cfg.micro_batch, shuffle_seed=cfg.seed + epoch)
        report.dropped_records = dropped
        losses = []
        for window in _windows(batches, cfg.accumulation_steps):
            model.zero_grad()
            window_loss = 0.0
            for k, batch in enumerate(window):
                rng = np.random.default_rng(
                    (cfg.seed, epoch, report.optimizer_steps, k))
                loss = model.loss(batch, train=True, rng=rng)
                scaled = loss * (1.0 / len(window))
                scaled.backward()
                window_loss += loss.item() / len(window)
            optimizer.step()
            report.optimizer_steps += 1
            losses.append(window_loss)
        report.epoch_train_losses.append(float(np.mean(losses)))

        val = eval_fn(model)
        report.epoch_val_metrics.append(json.loads(val.to_json()))
        log(f"epoch {epoch}: train loss {report.epoch_train_losses[-1]:.4f}, "
            f"val end acc {val.end_accuracy:.3f}, val F1 {val.span_f1:.3f}")
        if val.end_accuracy > best_metric:
            best_metric = val.end_accuracy
            best_state = model.state_arrays()
            report.best_epoch = epoch
            stale_epochs = 0
            if ckpt_dir is not None:
                ckpt_dir = Path(ckpt_dir)
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                name = f"ckpt-epoch{epoch}.dqaw"
                save_checkpoint(ckpt_dir / name, model)
                report.best_checkpoint = name
        else:
            stale_epochs += 1
        report.stopped_epoch = epoch
        if stale_epochs >= cfg.early_stop_patience:
            log(f"early stop at epoch {epoch}: no improvement for "
                f"{stale_epochs} epochs")
            break

    if best_state is not None:
        model.load_state_arrays(best_state)
    report.wall_time_seconds = time.monotonic() - t0
    return report
