"""Command-line entry point: ``vinecam <prep|split|train|eval|cv|gradcam|report|synth>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import commands
from .config import load_config, write_config
from .densenet import DEFAULT_CAM_LAYER, STAGE_NAMES
from .errors import VinecamError
from .metrics import AVERAGES


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="overrides the split and training seeds")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value, e.g. --set train.max_epochs=5")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vinecam", description="Leaf disease classification pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="preprocess a directory-per-class tree")
    _common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--force", action="store_true", help="overwrite outputs made with another config")

    p = sub.add_parser("split", help="write a stratified train/val/test manifest")
    _common(p)
    p.add_argument("--data", help="dataset root (defaults to [data] root)")

    p = sub.add_parser("train", help="train on a split manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", help="last.ckpt of an earlier run to continue from")

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--average", choices=AVERAGES, default="macro")

    p = sub.add_parser("cv", help="stratified k-fold cross-validation")
    _common(p)
    p.add_argument("--data", help="dataset root (defaults to [data] root)")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--parallel", type=int, default=1, help="folds trained concurrently")

    p = sub.add_parser("gradcam", help="Grad-CAM heatmap and overlay for one image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target", default="predicted", help="'predicted', a class name or index")
    p.add_argument("--layer", default=DEFAULT_CAM_LAYER, help=f"one of: {', '.join(STAGE_NAMES)}")
    p.add_argument("--alpha", type=float, default=0.5)

    p = sub.add_parser("report", help="summarize a run directory")
    _common(p, out_required=False)
    p.add_argument("--run", required=True)

    p = sub.add_parser("synth", help="generate the procedural 4-class texture corpus")
    _common(p)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    return parser


def _config(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(args) -> int:
    if args.command == "report":
        doc = commands.cmd_report(args.run, args.out)
        if doc["missing"]:
            print(f"report written; missing artifacts: {', '.join(doc['missing'])}")
        else:
            print("report written")
        return 0
    if args.command == "gradcam":
        res = commands.cmd_gradcam(args.checkpoint, args.image, args.out, args.target, args.layer, args.alpha)
        print(f"predicted {res['predicted']} (p={res['probability']:.4f}); "
              f"heatmap for {res['target']} -> {res['heatmap']}, {res['overlay']}")
        return 0
    if args.command == "eval":
        res = commands.cmd_eval(args.checkpoint, args.manifest, args.split, args.out, args.average)
        rep = res["report"]
        print(" ".join(f"{k}={rep[k]:.4f}" for k in commands.SUMMARY_METRICS))
        return 0

    cfg = _config(args)
    if args.command == "synth":
        from .synth import generate_corpus
        generate_corpus(args.out, args.per_class, args.size, cfg.split_seed)
        print(f"wrote {args.per_class} images per class to {args.out}")
        return 0
    if args.command == "prep":
        res = commands.cmd_prep(cfg, args.in_dir, args.out, args.force)
        print(f"preprocessed {res['written']} images, {len(res['failed'])} failed")
        return 2 if res["failed"] else 0
    if args.command == "split":
        root = args.data or cfg.data_root
        if not root:
            raise UsageError("split needs --data or a [data] root in the config")
        res = commands.cmd_split(cfg, root, args.out)
        print(res["table"])
        return 0
    if args.command == "train":
        res = commands.cmd_train(cfg, args.manifest, args.out, args.resume)
        write_config(cfg, f"{args.out}/config.ini")
        r = res["result"]
        print(f"best epoch {r.best_epoch} val_loss {r.best_val_loss:.4f}; checkpoint {res['checkpoint']}")
        return 0
    if args.command == "cv":
        root = args.data or cfg.data_root
        if not root:
            raise UsageError("cv needs --data or a [data] root in the config")
        summary = commands.cmd_cv(cfg, root, args.out, args.k, None, args.parallel)
        accs = ", ".join(f"{a:.4f}" for a in summary["fold_accuracies"])
        print(f"fold accuracies: {accs}; mean {summary['mean_accuracy']:.4f}")
        return 0
    raise UsageError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"vinecam: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except UsageError as exc:
        print(f"vinecam: error: {exc}", file=sys.stderr)
        return 1
    except VinecamError as exc:
        print(f"vinecam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, FileNotFoundError) as exc:
        print(f"vinecam: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
