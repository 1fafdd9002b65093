"""Command-line entry point: ``mspn <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 internal contract violation.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baseline, checkpoint, data, gradcheck, metrics, optim, synth
from .errors import CheckpointError, ConfigError, ContractError
from .graph import VARIANTS, MSPNConfig, build_variant

log = logging.getLogger("mspn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONTRACT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_tuple(n):
    def parse(text):
        try:
            values = tuple(int(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
        if len(values) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
        return values
    return parse


def _add_training_flags(p):
    p.add_argument("--data", required=True, help="dataset root with train/ and test/")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--channels", type=_int_tuple(4), default=(96, 256, 384, 512),
                   help="conv1..conv4 map counts, e.g. 96,256,384,512")
    p.add_argument("--fc", type=_int_tuple(2), default=(1024, 1024), help="fc1,fc2 widths")
    p.add_argument("--workers", type=int, default=int(os.environ.get("MSPN_WORKERS", "1")))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mspn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--shared-frac", type=float, default=0.3)
    p.add_argument("--alphabet-size", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("train", help="train an MSPN or one of its variants")
    _add_training_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path, e.g. model.mspn")
    p.add_argument("--variant", default="MSPN", choices=list(VARIANTS))
    p.add_argument("--pool-mode", default="max", choices=["max", "average"])
    p.add_argument("--starred-fc2", type=int, default=512,
                   help="fc2 width of the starred variant (0 keeps --fc)")
    p.add_argument("--history", help="JSON-lines history path (default: <out>.history.jsonl)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--eval-seed", type=int, default=baseline.EVAL_SEED)

    p = sub.add_parser("ablate", help="train and evaluate all six pooling configurations")
    _add_training_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pool-mode", default="max", choices=["max", "average"])
    p.add_argument("--starred-fc2", type=int, default=512)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("baseline-train", help="train the patch-classifier baseline")
    _add_training_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--history")

    p = sub.add_parser("baseline-eval", help="evaluate a patch-classifier checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--eval-seed", type=int, default=baseline.EVAL_SEED)
    return parser


def _train_config(args) -> optim.TrainConfig:
    return optim.TrainConfig(lr=args.lr, momentum=args.momentum, patience=args.patience,
                             batch_size=args.batch_size, max_epochs=args.max_epochs,
                             seed=args.seed, workers=args.workers)


def _load_train(args, height=data.INPUT_HEIGHT, min_width=26):
    samples, manifest = data.load_dataset(args.data, "train", height, min_width)
    if manifest.siw10_verified:
        log.info("dataset matches the published SIW-10 split sizes")
    return samples, manifest


def _train_mspn(args, variant, samples, manifest):
    cfg = MSPNConfig(channels=args.channels, fc=args.fc, ssp_mode=args.pool_mode,
                     n_classes=len(manifest.class_names))
    net = build_variant(variant, cfg, seed=args.seed, class_names=manifest.class_names,
                        starred_fc2=args.starred_fc2 or None)
    train_set, val_set = data.stratified_split(samples, args.val_frac, args.seed)
    return optim.train(net, train_set, val_set, _train_config(args))


def _history_path(args):
    return args.history or f"{args.out}.history.jsonl"


def cmd_synth(args):
    spec = synth.SynthSpec(seed=args.seed, train_per_class=args.train_per_class,
                           test_per_class=args.test_per_class, shared_frac=args.shared_frac,
                           alphabet_size=args.alphabet_size, noise=args.noise)
    synth.write_corpus(args.out, spec)
    print(f"wrote {spec.n_classes * (spec.train_per_class + spec.test_per_class)} images to {args.out}")


def cmd_train(args):
    samples, manifest = _load_train(args)
    net, history = _train_mspn(args, args.variant, samples, manifest)
    checkpoint.save_checkpoint(net, args.out)
    optim.write_history(history, _history_path(args))
    best = min(r["val_error"] for r in history) if history else float("nan")
    print(f"{args.variant}: {len(history)} epochs, best val error {best:.4f}, saved {args.out}")


def _evaluate_checkpoint(model_path, data_root, split, eval_seed):
    net = checkpoint.load_checkpoint(model_path)
    if net.kind == "patchnet":
        samples, manifest = data.load_dataset(data_root, split, data.PATCH_SOURCE_HEIGHT, None)
        model = baseline.PatchClassifier(net, eval_seed)
    else:
        samples, manifest = data.load_dataset(data_root, split, net.config.input_height,
                                              net.config.min_width)
        model = net
    if manifest.class_names != net.class_names:
        raise ConfigError(
            f"dataset classes {manifest.class_names} differ from model classes {net.class_names}")
    return metrics.evaluate(model, samples, net.class_names)


def _print_result(result):
    print(f"accuracy {result.accuracy:.4f}  average error {100 * result.avg_error:.2f}%")
    for name, acc in result.per_class.items():
        print(f"  {name:<12} {'n/a' if acc is None else f'{acc:.4f}'}")


def cmd_eval(args):
    result = _evaluate_checkpoint(args.model, args.data, args.split, args.eval_seed)
    metrics.write_reports(result, args.report)
    _print_result(result)


def cmd_baseline_eval(args):
    net = checkpoint.load_checkpoint(args.model)
    if net.kind != "patchnet":
        raise ConfigError(f"{args.model} is not a patch-classifier checkpoint")
    cmd_eval(args)


def cmd_ablate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples, manifest = _load_train(args)
    rows = [["variant", "configuration", "average_error_pct", "accuracy_pct"]]
    for variant, stages in VARIANTS.items():
        net, history = _train_mspn(args, variant, samples, manifest)
        model_path = out / f"{variant}.mspn"
        checkpoint.save_checkpoint(net, model_path)
        optim.write_history(history, out / f"{variant}.history.jsonl")
        result = _evaluate_checkpoint(model_path, args.data, "test", baseline.EVAL_SEED)
        metrics.write_reports(result, out / variant)
        rows.append([variant, " + ".join(stages), f"{100 * result.avg_error:.2f}",
                     f"{100 * result.accuracy:.2f}"])
        log.info("%s done: average error %.2f%%", variant, 100 * result.avg_error)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    table = format_table(rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")


def format_table(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_gradcheck(args):
    results = gradcheck.run_gradcheck(args.trials, args.seed, report=print)
    failed = [k for k, v in results.items() if not v < gradcheck.TOLERANCE]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_CONTRACT
    print(f"all {len(results)} kinds below {gradcheck.TOLERANCE:g}")
    return EXIT_OK


def cmd_baseline_train(args):
    samples, manifest = _load_train(args, data.PATCH_SOURCE_HEIGHT, None)
    net_cfg = baseline.PatchNetConfig(args.channels, args.fc,
                                      n_classes=len(manifest.class_names))
    net, history = baseline.baseline_train(samples, _train_config(args), net_cfg,
                                           manifest.class_names, args.val_frac)
    checkpoint.save_checkpoint(net, args.out)
    optim.write_history(history, _history_path(args))
    print(f"patch net: {len(history)} epochs, saved {args.out}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "baseline-train": cmd_baseline_train,
    "baseline-eval": cmd_baseline_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args) or EXIT_OK
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ConfigError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
