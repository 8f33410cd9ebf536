"""Command-line front end: pretrain, finetune, embed, evaluate, calibrate, info."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .adapters import LinearCombiner
from .calibration import (IsotonicCalibrator, TemperatureScaler, ece, reliability_bins,
                          softmax_np)
from .data_io import (Checkpoint, TimeSeriesDataset, load_checkpoint, load_tsv, read_header,
                      save_checkpoint)
from .finetune import (FinetuneConfig, FinetuneResult, _build_adapter, extract_embeddings,
                       finetune, predict_logits, prepare_inputs, train_val_split)
from .model import PRESETS, MantisEncoder, count_parameters, get_config
from .pretrain import AugmentConfig, ContrastiveConfig, pretrain

logger = logging.getLogger("tsmantis")

ADAPTER_CHOICES = ("none", "pca", "svd", "randproj", "varsel", "lcomb")


class MetricsWriter:
    """Line-delimited JSON records to stdout and, optionally, a file."""

    def __init__(self, path: Optional[str] = None, echo: bool = True):
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self._echo = echo

    def __call__(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        if self._echo:
            print(line)
        if self._fh is not None:
            self._fh.write(line + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _configure_logging() -> None:
    level = os.environ.get("TS_MANTIS_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _threads(n: Optional[int]):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsmantis",
                                     description="Time-series classification foundation model")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--data", help="training / input TSV")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--metrics-out", default=None)

    p = sub.add_parser("pretrain", help="contrastive pre-training on unlabelled series")
    common(p)
    p.add_argument("--checkpoint", help="initial encoder (optional)")
    p.add_argument("--out", help="output checkpoint")
    p.add_argument("--arch", choices=sorted(PRESETS), default="mantis")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--crop-max", type=float, default=0.2)

    p = sub.add_parser("finetune", help="train a classifier (probe, head, scratch, full)")
    common(p)
    p.add_argument("--data-test", help="test TSV reported per epoch")
    p.add_argument("--checkpoint", help="pre-trained encoder")
    p.add_argument("--out", help="output checkpoint")
    p.add_argument("--arch", choices=sorted(PRESETS), default="mantis",
                   help="encoder preset when no checkpoint is given")
    p.add_argument("--regime", choices=("probe", "head", "scratch", "full"), default="full")
    p.add_argument("--adapter", choices=ADAPTER_CHOICES, default="none")
    p.add_argument("--dnew", type=int, default=None)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="hold out this fraction of --data as a validation split")

    p = sub.add_parser("embed", help="write frozen embeddings as TSV")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--adapter", choices=ADAPTER_CHOICES[:-1], default=None,
                   help="fit this adapter on --data (default: the checkpoint's adapter)")
    p.add_argument("--dnew", type=int, default=None)
    p.add_argument("--batch", type=int, default=256)

    p = sub.add_parser("evaluate", help="accuracy and ECE of a classifier checkpoint")
    common(p)
    p.add_argument("--data-test")
    p.add_argument("--checkpoint")
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("calibrate", help="fit temperature / isotonic correctors, report ECE")
    common(p)
    p.add_argument("--data-test")
    p.add_argument("--checkpoint")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", help="reliability table TSV (default: stdout)")

    p = sub.add_parser("info", help="describe a checkpoint")
    p.add_argument("--checkpoint")
    return parser


REQUIRED = {
    "pretrain": ("data", "out"),
    "finetune": ("data", "out"),
    "embed": ("data", "checkpoint", "out"),
    "evaluate": ("checkpoint",),
    "calibrate": ("data", "data_test", "checkpoint"),
    "info": ("checkpoint",),
}


def _validate(parser: argparse.ArgumentParser, args) -> None:
    missing = [f"--{name.replace('_', '-')}" for name in REQUIRED[args.command]
               if getattr(args, name, None) is None]
    if missing:
        parser.error(f"{args.command} requires {', '.join(missing)}")
    if args.command == "evaluate" and args.data_test is None and args.data is None:
        parser.error("evaluate requires --data-test (or --data)")
    if args.command == "finetune":
        if args.regime == "probe" and args.adapter == "lcomb":
            parser.error("the lcomb adapter is trained by backpropagation; "
                         "it cannot be used with --regime probe")
        if not 0.0 <= args.val_fraction < 1.0:
            parser.error("--val-fraction must lie in [0, 1)")


def _channels(dataset: TimeSeriesDataset) -> np.ndarray:
    return dataset.X.reshape(-1, dataset.length)


def cmd_pretrain(args, emit: MetricsWriter) -> dict:
    data = load_tsv(args.data)
    if args.checkpoint:
        encoder = load_checkpoint(args.checkpoint).encoder
    else:
        encoder = MantisEncoder(get_config(args.arch), seed=args.seed)
    config = ContrastiveConfig(temperature=args.temperature, batch_size=args.batch,
                               epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                               warmup_epochs=args.warmup, seed=args.seed)
    augment = AugmentConfig(crop_max=args.crop_max, seed=args.seed)
    projector, losses = pretrain(
        encoder, _channels(data), config, augment=augment,
        callback=lambda epoch, loss: emit({"epoch": epoch, "split": "pretrain", "loss": loss}))
    save_checkpoint(args.out, encoder=encoder, projector=projector,
                    meta={"stage": "pretrain", "seed": args.seed})
    return {"command": "pretrain", "epochs": args.epochs, "final_loss": losses[-1],
            "out": args.out}


def cmd_finetune(args, emit: MetricsWriter) -> dict:
    data = load_tsv(args.data)
    test = load_tsv(args.data_test, classes=data.classes) if args.data_test else None
    if args.checkpoint:
        encoder = load_checkpoint(args.checkpoint).encoder
        if encoder is None:
            raise ValueError(f"{args.checkpoint} holds no encoder")
    else:
        if args.regime != "scratch":
            logger.warning("no --checkpoint: starting from a randomly initialised encoder")
        encoder = MantisEncoder(get_config(args.arch), seed=args.seed)
    val = None
    if args.val_fraction > 0:
        data, val = train_val_split(data, 1.0 - args.val_fraction, seed=args.seed)
    adapter = _build_adapter(args.adapter, args.dnew, data.n_channels, args.seed)
    if adapter is not None and not isinstance(adapter, LinearCombiner):
        adapter.fit(prepare_inputs(data.X, encoder.config.seq_len))
    config = FinetuneConfig(regime=args.regime, lr=args.lr, epochs=args.epochs,
                            batch_size=args.batch, weight_decay=args.weight_decay,
                            warmup_epochs=args.warmup, seed=args.seed)
    result = finetune(encoder, data, config, val=val, test=test, adapter=adapter,
                      num_classes=data.num_classes, callback=emit)
    save_checkpoint(args.out, encoder=result.encoder, head=result.head, adapter=result.adapter,
                    probe=result.probe,
                    meta={"stage": "finetune", "regime": args.regime, "classes": data.classes,
                          "seed": args.seed})
    summary = {"command": "finetune", "regime": args.regime, "out": args.out}
    for split in ("train", "val", "test"):
        last, best = result.last(split), result.best(split)
        if last is not None:
            summary[f"{split}_last_accuracy"] = last["accuracy"]
            summary[f"{split}_best_accuracy"] = best["accuracy"]
            summary[f"{split}_best_epoch"] = best["epoch"]
    return summary


def _result_from_checkpoint(ckpt: Checkpoint) -> FinetuneResult:
    if ckpt.encoder is None or (ckpt.head is None and ckpt.probe is None):
        raise ValueError("checkpoint does not hold a trained classifier")
    return FinetuneResult(encoder=ckpt.encoder, head=ckpt.head, probe=ckpt.probe,
                          adapter=ckpt.adapter)


def _load_split(path: str, ckpt: Checkpoint) -> TimeSeriesDataset:
    return load_tsv(path, classes=ckpt.meta.get("classes"))


def cmd_embed(args, emit: MetricsWriter) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_tsv(args.data)
    adapter = ckpt.adapter
    if args.adapter is not None:
        adapter = _build_adapter(args.adapter, args.dnew, data.n_channels, args.seed)
        if adapter is not None:
            adapter.fit(prepare_inputs(data.X, ckpt.encoder.config.seq_len))
    Z = extract_embeddings(ckpt.encoder, data.X, adapter, args.batch)
    labels = [data.classes[i] for i in data.y]
    with open(args.out, "w", encoding="utf-8") as fh:
        for label, row in zip(labels, Z):
            fh.write(label + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    return {"command": "embed", "n": int(Z.shape[0]), "width": int(Z.shape[1]), "out": args.out}


def cmd_evaluate(args, emit: MetricsWriter) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    test = _load_split(args.data_test or args.data, ckpt)
    logits = predict_logits(_result_from_checkpoint(ckpt), test.X)
    probs = softmax_np(logits)
    accuracy = float((probs.argmax(axis=1) == test.y).mean())
    value = ece(probs, test.y, args.bins)
    emit({"split": "test", "accuracy": accuracy, "ece": value})
    print(f"accuracy {accuracy:.6f} ece {value:.6f}")
    return {"command": "evaluate", "accuracy": accuracy, "ece": value}


def cmd_calibrate(args, emit: MetricsWriter) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    result = _result_from_checkpoint(ckpt)
    val = _load_split(args.data, ckpt)
    test = _load_split(args.data_test, ckpt)
    val_logits = predict_logits(result, val.X)
    test_logits = predict_logits(result, test.X)
    raw = softmax_np(test_logits)
    scaler = TemperatureScaler().fit(val_logits, val.y)
    tempered = scaler.transform(test_logits)
    isotonic = IsotonicCalibrator().fit(softmax_np(val_logits), val.y)
    iso = isotonic.transform(raw)
    values = {"ece_before": ece(raw, test.y, args.bins),
              "ece_after_temp": ece(tempered, test.y, args.bins),
              "ece_after_isotonic": ece(iso, test.y, args.bins)}
    table = "".join(f"# {name}\n{reliability_bins(p, test.y, args.bins).to_tsv()}"
                    for name, p in (("uncalibrated", raw), ("temperature", tempered),
                                    ("isotonic_ovr", iso)))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    emit({"split": "test", "temperature": scaler.temperature_, **values})
    print(" ".join(f"{k} {v:.6f}" for k, v in values.items()))
    return {"command": "calibrate", "temperature": scaler.temperature_, **values}


def cmd_info(args, emit: MetricsWriter) -> dict:
    header, _ = read_header(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    summary = {"command": "info", "version": header["version"]}
    if ckpt.encoder is not None:
        summary["parameters"] = count_parameters(ckpt.encoder)
        print(f"parameters {summary['parameters']}")
    printable = {k: v for k, v in header.items() if k != "tensors"}
    printable["tensors"] = len(header["tensors"])
    print(json.dumps(printable, indent=1, sort_keys=True))
    return summary


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "embed": cmd_embed,
            "evaluate": cmd_evaluate, "calibrate": cmd_calibrate, "info": cmd_info}


def main(argv: Optional[List[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(parser, args)
    emit = MetricsWriter(getattr(args, "metrics_out", None), echo=args.command != "info")
    try:
        with _threads(getattr(args, "threads", None)):
            summary = COMMANDS[args.command](args, emit)
    except (OSError, ValueError, KeyError) as exc:
        print(f"tsmantis {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        emit.close()
    print(json.dumps({"summary": summary}, sort_keys=True))
    return 0


run = main

if __name__ == "__main__":
    sys.exit(main())
