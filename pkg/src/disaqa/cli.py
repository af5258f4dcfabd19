"""Command-line entry point.

Subcommands: gen-data, train, eval, predict, count-params, grad-check.
Reports are JSON, written to --out when given and stdout otherwise.  Exit
status: 0 success, 1 usage error, 2 runtime/validation error.

Heavy imports (numpy and the model stack) happen inside the command
handlers so that DISAQA_THREADS can cap the BLAS thread pools before
numpy first loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_ENV_TARGETS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                       "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

DEFAULT_GRAD_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _apply_thread_cap() -> None:
    cap = os.environ.get("DISAQA_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ValueError(f"DISAQA_THREADS must be a positive integer, got {cap!r}")
    for var in _THREAD_ENV_TARGETS:
        os.environ.setdefault(var, cap)


def _emit(payload: str, out: str | None) -> None:
    if out:
        Path(out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)


def _model_config(preset: str, max_len: int | None, vocab_size: int):
    from .model import ModelConfig
    if preset == "paper-scale":
        cfg = ModelConfig.paper_scale()
    else:
        cfg = ModelConfig.toy(vocab_size=vocab_size)
    if max_len is not None:
        from dataclasses import replace
        cfg = replace(cfg, max_len=max_len)
    return cfg


def _cmd_gen_data(args) -> int:
    from .data import generate_synthetic, save_dataset
    records = generate_synthetic(args.n, seed=args.seed)
    if args.out:
        save_dataset(records, args.out)
        print(f"wrote {len(records)} records to {args.out}", file=sys.stderr)
    else:
        for r in records:
            print(json.dumps(r.__dict__, ensure_ascii=False, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    from .checkpoint import save as save_checkpoint
    from .data import load_dataset, split_dataset
    from .model import QAModel
    from .tokenizer import build_vocab
    from .training import (TrainConfig, evaluate_model, fit,
                           load_train_config)

    train_cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        from dataclasses import replace
        train_cfg = replace(train_cfg, seed=args.seed)
    records = load_dataset(args.data)
    train_records, val_records = split_dataset(records, val_fraction=0.1,
                                               seed=train_cfg.seed)
    vocab = build_vocab(r.question + " " + r.context for r in train_records)
    model_cfg = _model_config(args.preset, args.max_len, len(vocab))
    model = QAModel.build(model_cfg, vocab, seed=train_cfg.seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = fit(model, train_records, val_records, train_cfg,
                 ckpt_dir=out_dir)
    save_checkpoint(out_dir / "model.dqaw", model)
    metrics = evaluate_model(model, val_records, train_cfg.micro_batch)
    (out_dir / "train-report.json").write_text(report.to_json() + "\n",
                                               encoding="utf-8")
    (out_dir / "val-metrics.json").write_text(metrics.to_json() + "\n",
                                              encoding="utf-8")
    print(f"best epoch {report.best_epoch}, "
          f"val end acc {metrics.end_accuracy:.3f}, "
          f"artifacts in {out_dir}", file=sys.stderr)
    return 0


def _gold_token_spans(records, max_len):
    """Token-position gold spans; packing arithmetic needs no real vocab."""
    from .data import DatasetError
    from .tokenizer import align_span, build_vocab, encode_pair
    vocab = build_vocab([r.question + " " + r.context for r in records])
    spans = {}
    for r in records:
        packed = encode_pair(r.question, r.context, vocab, max_len)
        char_end = r.answer_start_char + len(r.answer_text)
        try:
            spans[r.id] = align_span(r.context, r.answer_start_char,
                                     char_end, packed)
        except Exception as exc:
            raise DatasetError(
                f"record {r.id!r} does not fit max_len {max_len}: {exc}"
            ) from exc
    return spans


def _cmd_eval(args) -> int:
    from .data import DatasetError, load_dataset

    records = load_dataset(args.data)
    if args.pred:
        max_len = args.max_len or 384
        gold = _gold_token_spans(records, max_len)
        preds, cands, refs, golds = [], [], [], []
        by_id = {r.id: r for r in records}
        with open(args.pred, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        for row in rows:
            rid = row["id"]
            if rid not in by_id:
                raise DatasetError(f"prediction for unknown record {rid!r}")
            preds.append((int(row["start"]), int(row["end"])))
            golds.append(gold[rid])
            cands.append(list(row["text"]))
            refs.append(list(by_id[rid].answer_text))
        from .metrics import compute_report
        report = compute_report(preds, golds, cands, refs)
    else:
        if not args.ckpt:
            raise DatasetError("eval needs --ckpt (inference) or --pred "
                               "(pure metric mode)")
        from .checkpoint import load_model
        from .training import evaluate_model
        model = load_model(args.ckpt)
        report = evaluate_model(model, records)
    _emit(report.to_json(), args.out)
    return 0


def _cmd_predict(args) -> int:
    from .checkpoint import load_model
    from .data import load_dataset, make_batches

    model = load_model(args.ckpt)
    records = load_dataset(args.data)
    by_id = {r.id: r for r in records}
    batches, dropped = make_batches(records, model.vocab,
                                    model.config.max_len, micro_batch=16)
    if dropped:
        print(f"skipped {dropped} records that exceed max_len",
              file=sys.stderr)
    lines = []
    for batch in batches:
        for i, pred in enumerate(model.predict_batch(batch)):
            lo, _ = batch.context_ranges[i]
            # Token position minus the context offset is a character
            # index, so the answer text comes straight from the source.
            context = by_id[batch.ids[i]].context
            text = context[pred.start - lo:pred.end - lo + 1]
            lines.append(json.dumps(
                {"id": batch.ids[i], "start": pred.start, "end": pred.end,
                 "text": text}, ensure_ascii=False, sort_keys=True))
    payload = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        print(f"wrote {len(lines)} predictions to {args.out}",
              file=sys.stderr)
    else:
        print(payload)
    return 0


def _cmd_count_params(args) -> int:
    from .lora import count_params
    from .model import QAModel

    cfg = _model_config(args.preset, args.max_len, vocab_size=200)
    model = QAModel.build(cfg, vocab=None, random_init=False)
    budget = count_params(model, mode="lora")
    _emit(budget.to_json(), args.out)
    return 0


def _cmd_grad_check(args) -> int:
    import numpy as np

    from . import tensor as T
    from .data import generate_synthetic, make_batches
    from .encoder import EncoderConfig
    from .model import ModelConfig, QAModel
    from .tokenizer import build_vocab

    records = generate_synthetic(2, seed=args.seed)
    vocab = build_vocab([r.question + " " + r.context for r in records])
    enc = EncoderConfig(vocab_size=len(vocab), d_model=16, n_layers=1,
                        n_heads=2, d_ffn=32, max_position=384,
                        dropout_rate=0.0)
    cfg = ModelConfig(encoder=enc, lora_dropout=0.0)
    model = QAModel.build(cfg, vocab, seed=args.seed)
    batches, _ = make_batches(records, vocab, cfg.max_len, micro_batch=2)
    batch = batches[0]

    report = T.grad_check(lambda: model.loss(batch),
                          dict(model.trainable_params()),
                          eps=1e-5, max_entries_per_param=4,
                          seed=args.seed)
    passed = bool(report.passed(DEFAULT_GRAD_TOL))
    _emit(json.dumps({
        "max_rel_error": float(report.max_rel_error),
        "worst_param": report.worst_param,
        "checked_entries": int(report.checked_entries),
        "tolerance": DEFAULT_GRAD_TOL,
        "passed": passed,
    }, sort_keys=True), args.out)
    return 0 if passed else 2


def build_parser() -> _Parser:
    parser = _Parser(prog="disaqa",
                     description="Span-extraction QA over disaster bulletins")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p, *, preset=False, data=False, ckpt=False,
               out_required=False, out_help="output path (default: stdout)"):
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (default: config seed or 0)")
        p.add_argument("--out", required=out_required, help=out_help)
        p.add_argument("--max-len", type=int, default=None,
                       help="sequence length cap")
        if preset:
            p.add_argument("--preset", choices=("toy", "paper-scale"),
                           default="toy", help="model size (default: toy)")
        if data:
            p.add_argument("--data", required=True, help="dataset JSONL")
        if ckpt:
            p.add_argument("--ckpt", help="weight checkpoint (.dqaw)")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, default=100, help="record count")
    p.set_defaults(func=_cmd_gen_data, seed=0)

    p = sub.add_parser("train", help="fit a model on a dataset")
    common(p, preset=True, data=True, out_required=True,
           out_help="directory for checkpoints and reports")
    p.add_argument("--config", help="TrainConfig JSON/TOML file")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or predictions file")
    common(p, data=True, ckpt=True)
    p.add_argument("--pred", help="predictions JSONL (pure metric mode)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="emit predictions JSONL")
    common(p, data=True, ckpt=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("count-params", help="parameter budget report")
    common(p, preset=True)
    p.set_defaults(func=_cmd_count_params)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    common(p)
    p.set_defaults(func=_cmd_grad_check, seed=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        _apply_thread_cap()
    except ValueError as exc:
        print(f"disaqa: error: {exc}", file=sys.stderr)
        return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except BrokenPipeError:
        return 0
    except Exception as exc:
        print(f"disaqa {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
