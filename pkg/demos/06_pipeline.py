"""End-to-end walkthrough: synthetic data -> training -> checkpoint -> eval.

Everything here is shrunk far below the presets so the script finishes in
well under a minute on a laptop CPU.  The point is to show the moving parts
wired together, not to reach good metrics.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from disaqa.checkpoint import load_model, save
from disaqa.data import generate_synthetic, make_batches, split_dataset
from disaqa.encoder import EncoderConfig
from disaqa.model import ModelConfig, QAModel
from disaqa.tokenizer import build_vocab
from disaqa.training import TrainConfig, evaluate_model, fit

print("== 1. synthetic corpus ==")
records = generate_synthetic(160, seed=11)
print(f"generated {len(records)} records")
r = records[0]
print(f"  question: {r.question!r}")
print(f"  context:  {r.context[:60]!r}...")
print(f"  answer:   {r.answer_text!r} at chars "
      f"[{r.answer_start_char}, {r.answer_end_char})")
# gold answers always slice cleanly out of the context
for rec in records:
    assert rec.context[rec.answer_start_char:rec.answer_end_char] \
        == rec.answer_text

train_recs, val_recs = split_dataset(records, val_fraction=0.1, seed=11)
print(f"split: {len(train_recs)} train / {len(val_recs)} val")

print()
print("== 2. vocab and model ==")
vocab = build_vocab(r.question + r.context for r in train_recs)
print(f"char vocab size {len(vocab)} (4 reserved ids)")

# deliberately tiny: d=16, one layer, short sequences
config = ModelConfig(
    encoder=EncoderConfig(vocab_size=len(vocab), d_model=16, n_layers=1,
                          n_heads=2, d_ffn=32, max_position=384,
                          dropout_rate=0.0),
    lora_rank=2, lora_dropout=0.0, max_len=384)
model = QAModel.build(config, vocab, seed=0)
n_total = sum(p.data.size for _, p in model.named_params())
n_train = sum(p.data.size for _, p in model.trainable_params())
print(f"params: {n_total} total, {n_train} trainable "
      f"({100.0 * n_train / n_total:.1f}%)")

print()
print("== 3. a few epochs of training ==")
cfg = TrainConfig(lr_heads=1e-3, lr_encoder_side=2e-4, micro_batch=16,
                  accumulation_steps=1, epochs=3, early_stop_patience=3,
                  seed=0)
with tempfile.TemporaryDirectory() as tmp:
    report = fit(model, train_recs, val_recs, cfg, ckpt_dir=tmp,
                 log=lambda msg: print("  " + msg))
    print(f"optimizer steps: {report.optimizer_steps}, "
          f"best epoch: {report.best_epoch}")
    assert report.epoch_train_losses[-1] < report.epoch_train_losses[0]

    print()
    print("== 4. checkpoint round trip ==")
    path = Path(tmp) / "model.dqaw"
    save(path, model)
    print(f"wrote {path.stat().st_size} bytes")
    restored = load_model(path)
    for name, p in model.named_params():
        q = dict(restored.named_params())[name]
        assert np.array_equal(p.data, q.data)
    print("restored weights identical bit for bit")

print()
print("== 5. evaluation ==")
val_report = evaluate_model(restored, val_recs)
print(json.dumps(json.loads(val_report.to_json()), indent=2))

print()
print("== 6. inspecting one prediction ==")
batches, _ = make_batches(val_recs[:4], vocab, config.max_len, micro_batch=4)
preds = restored.predict_batch(batches[0])
rec = val_recs[0]
pred = preds[0]
lo = batches[0].context_ranges[0][0]
text = rec.context[pred.start - lo:pred.end - lo + 1]
print(f"question:  {rec.question!r}")
print(f"gold:      {rec.answer_text!r}")
print(f"predicted: {text!r} (tokens {pred.start}..{pred.end}, "
      f"score {pred.score:.3f})")
print()
print("pipeline demo done")
