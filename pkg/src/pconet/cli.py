"""Command-line front door: train, eval, predict, and summary against
directory datasets.

Exit codes: 0 success, 1 predict with no decodable input, 2 usage error,
3 dataset error, 4 training abort (non-finite loss), 5 checkpoint error.
Values may come from a flat `key = value` config file (--config); flags
always win. `PCONET_THREADS` caps worker parallelism.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pconet import data as data_mod
from pconet import metrics as metrics_mod
from pconet import model as model_mod
from pconet import tensor

EXIT_OK = 0
EXIT_PREDICT_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_CHECKPOINT = 5


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pconet",
        description="Train, evaluate, and run the PCONet ultrasound classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file; flags take precedence")
        p.add_argument("--deterministic", action="store_true", default=None,
                       help="single-threaded, fully reproducible mode")

    t = sub.add_parser("train", help="train on a labeled directory tree")
    t.add_argument("--data", help="dataset root with infected/ and not_infected/")
    t.add_argument("--val-dir", help="explicit validation root (default: 80/20 split)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--augment", choices=("on", "off"))
    t.add_argument("--out", help="checkpoint output path")
    t.add_argument("--log", help="CSV curve-log path")
    common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled tree")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--batch", type=int)
    e.add_argument("--json", action="store_true", default=None,
                   help="emit one JSON object instead of text")
    common(e)

    p = sub.add_parser("predict", help="classify individual image files")
    p.add_argument("--checkpoint")
    p.add_argument("images", nargs="+", metavar="IMAGE")
    common(p)

    s = sub.add_parser("summary", help="print the architecture table")
    s.add_argument("--checkpoint", help="summarize a saved model instead of a fresh one")
    common(s)
    return parser


def _load_config(path: str) -> dict[str, str]:
    cfg: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected `key = value`")
        cfg[key.strip()] = value.strip()
    return cfg


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise UsageError(f"config key {key}: expected on/off, got {raw!r}")


def _effective(args, cfg: dict[str, str], key: str, cast=str, default=None):
    """Flag value if explicitly given, else config-file value, else default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in cfg:
        if cast is bool:
            return _parse_bool(cfg[key], key)
        try:
            return cast(cfg[key])
        except ValueError as exc:
            raise UsageError(f"config key {key}: {exc}") from exc
    return default


def _apply_deterministic(args, cfg) -> None:
    if _effective(args, cfg, "deterministic", bool, False):
        tensor.set_num_threads(1)


def _load_checkpoint(path: str | None) -> model_mod.Model:
    if not path:
        raise UsageError("--checkpoint is required")
    try:
        return model_mod.load_checkpoint(path)
    except OSError as exc:
        raise model_mod.CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_train(args, cfg) -> int:
    data_root = _effective(args, cfg, "data")
    if not data_root:
        raise UsageError("--data is required")
    val_dir = _effective(args, cfg, "val-dir")
    out_path = _effective(args, cfg, "out", str, "model.pcon")
    log_path = _effective(args, cfg, "log", str, "training_log.csv")
    augment = _effective(args, cfg, "augment", bool, True)
    if isinstance(augment, str):
        augment = augment == "on"
    try:
        config = model_mod.TrainConfig(
            epochs=_effective(args, cfg, "epochs", int, 30),
            batch_size=_effective(args, cfg, "batch", int, 16),
            learning_rate=_effective(args, cfg, "lr", float, 1e-5),
            seed=_effective(args, cfg, "seed", int, 0),
            augment=augment,
            train_dir=Path(data_root),
            val_dir=Path(val_dir) if val_dir else None,
            log_path=Path(log_path),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _apply_deterministic(args, cfg)

    items = data_mod.scan_dataset(data_root)
    if val_dir:
        train_items, val_items = items, data_mod.scan_dataset(val_dir)
    else:
        parts = data_mod.split(items, ratio=0.8, seed=config.seed)
        train_items, val_items = parts.train, parts.validation

    net = model_mod.build_pconet(seed=config.seed)
    print(
        f"training on {len(train_items)} images "
        f"({model_mod.steps_per_epoch(len(train_items), config.batch_size)} steps/epoch), "
        f"validating on {len(val_items)}"
    )

    def progress(row):
        print(
            f"epoch {row.epoch}/{config.epochs} "
            f"train_loss={row.train_loss:.4f} train_acc={row.train_acc:.4f} "
            f"val_loss={row.val_loss:.4f} val_acc={row.val_acc:.4f}"
        )

    result = model_mod.train(net, train_items, val_items, config, on_epoch=progress)
    model_mod.save_checkpoint(net, out_path, result.state)
    last = result.log[-1]
    print(f"final: val_acc={last.val_acc:.4f} val_precision={last.val_precision:.4f} "
          f"val_recall={last.val_recall:.4f}")
    print(f"checkpoint: {out_path}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    _apply_deterministic(args, cfg)
    net = _load_checkpoint(_effective(args, cfg, "checkpoint"))
    data_root = _effective(args, cfg, "data")
    if not data_root:
        raise UsageError("--data is required")
    batch = _effective(args, cfg, "batch", int, 16)
    if batch < 1:
        raise UsageError(f"batch size must be >= 1, got {batch}")
    items = data_mod.scan_dataset(data_root)
    result = model_mod.evaluate(net, items, batch)
    rep = metrics_mod.report(result.confusion)

    if _effective(args, cfg, "json", bool, False):
        payload = {
            "accuracy": rep.accuracy,
            "per_class": {
                c.name: {
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "support": c.support,
                }
                for c in rep.per_class
            },
            "confusion": result.confusion.counts.tolist(),
            "loss": result.loss,
            "n": result.n,
        }
        print(json.dumps(payload, indent=2))
        return EXIT_OK

    print(f"Accuracy: {rep.accuracy:.2f}")
    print("Class | Precision | Recall | F1 | Support")
    for c in rep.per_class:
        flag = " (degenerate)" if c.degenerate else ""
        print(f"{c.name} | {c.precision:.2f} | {c.recall:.2f} | {c.f1:.2f} | {c.support}{flag}")
    print("Confusion matrix (rows=actual, cols=predicted):")
    for a, name in enumerate(result.confusion.class_names):
        row = result.confusion.counts[a]
        print(f"{name} | {row[0]} | {row[1]}")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    _apply_deterministic(args, cfg)
    net = _load_checkpoint(_effective(args, cfg, "checkpoint"))
    failures = 0
    for image_path in args.images:
        try:
            pixels = data_mod.load_image(image_path)
        except data_mod.DatasetError as exc:
            print(f"error: {exc}", file=sys.stderr)
            failures += 1
            continue
        label, (s0, s1) = net.predict(pixels)
        print(f"{image_path}\t{label}\t{s0:.6f}\t{s1:.6f}")
    if failures == len(args.images):
        return EXIT_PREDICT_FAILED
    return EXIT_OK


def cmd_summary(args, cfg) -> int:
    _apply_deterministic(args, cfg)
    checkpoint = _effective(args, cfg, "checkpoint")
    net = _load_checkpoint(checkpoint) if checkpoint else model_mod.build_pconet()
    print(model_mod.summary(net))
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "summary": cmd_summary,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        cfg = _load_config(args.config) if getattr(args, "config", None) else {}
        return _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except data_mod.DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except model_mod.TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except model_mod.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
