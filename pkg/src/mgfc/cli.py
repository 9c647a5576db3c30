"""Command-line harness: gen-data, train, eval, gradcheck, inspect.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 data/integrity error.
Every config key is exposed as a --key flag; MGFC_PRECISION={32|64} selects
the numeric mode.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import tensor as T
from .backbone import MGFCModel
from .config import SCHEMA, RunConfig
from .data import CLASS_NAMES, load_split, read_checkpoint, write_dataset
from .errors import (ConfigError, DataError, FormatError, GenerationError,
                     IntegrityError, MgfcError, ParameterError)
from .gradchecks import run_suite
from .seghead import miou
from .train import evaluate, load_into_model, train

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    for key in SCHEMA:
        parser.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="V")


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k.split(":", 1)[1]: v for k, v in vars(args).items()
                 if k.startswith("cfg:") and v is not None}
    if getattr(args, "config", None):
        return RunConfig.from_file(args.config, overrides)
    return RunConfig(overrides)


def _apply_precision() -> None:
    mode = os.environ.get("MGFC_PRECISION", "32")
    if mode not in ("32", "64"):
        raise ConfigError(f"MGFC_PRECISION must be 32 or 64, got '{mode}'")
    T.set_precision(int(mode))


def _write_resolved(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.txt"), "w") as fh:
        fh.write(f"# content-hash {cfg.content_hash()}\n")
        fh.write(cfg.resolved_text())


def cmd_gendata(args) -> int:
    cfg = _resolve_config(args)
    count = write_dataset(args.out, cfg.dataset_spec())
    print(f"wrote {count} samples under {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _write_resolved(cfg, args.out)
    samples = load_split(args.data, "source")
    model = MGFCModel(cfg.model_config())
    records = train(model, samples,
                    iters=cfg["train.iters"], batch=cfg["train.batch"],
                    lr=cfg["optim.lr"], weight_decay=cfg["optim.weight_decay"],
                    out_dir=args.out,
                    checkpoint_every=cfg["train.checkpoint_every"],
                    metrics_path=os.path.join(args.out, "metrics.jsonl"))
    if records:
        from .report import plot_training_curves
        plot_training_curves(records, os.path.join(args.out, "training_curves.png"))
        last = records[-1]
        print(f"trained {len(records)} iters: final loss {last['loss']:.4f}, "
              f"train mIoU {last['miou']:.4f}")
    else:
        print("trained 0 iters: checkpoint equals initialization")
    print(f"checkpoint: {os.path.join(args.out, 'ckpt_final.mgc')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model = MGFCModel(cfg.model_config())
    load_into_model(model, args.checkpoint)
    samples = load_split(args.data, args.domain)
    cm = evaluate(model, samples)
    per_class, mean_iou = miou(cm)
    for name, iou in zip(CLASS_NAMES, per_class):
        shown = "absent" if np.isnan(iou) else f"{iou:.4f}"
        print(f"IoU[{name}] = {shown}")
    print(f"mIoU = {mean_iou:.4f}")
    print(f"pixel accuracy = {cm.accuracy():.4f}")
    if args.out:
        from .report import write_eval_report
        write_eval_report(args.out, CLASS_NAMES, per_class, mean_iou,
                          cm.accuracy(), args.domain)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if os.environ.get("MGFC_PRECISION", "64") != "64":
        raise ConfigError("gradcheck requires MGFC_PRECISION=64")
    T.set_precision(64)
    seeds = tuple(range(args.seeds))
    results = run_suite(seeds=seeds, tol=args.tol,
                        corrupt=args.corrupt or None)
    failed = 0
    for name, err, ok in results:
        print(f"{'pass' if ok else 'FAIL'}  {name:<24} max rel err {err:.3e}")
        failed += not ok
    print(f"{len(results) - failed}/{len(results)} gradient checks passed "
          f"(tol {args.tol:.0e}, {len(seeds)} seeds)")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILURE


def cmd_inspect(args) -> int:
    state = read_checkpoint(args.checkpoint)
    frozen = state.pop("__frozen_hash__")
    for name in sorted(state):
        print(f"{name:<28} {tuple(state[name].shape)}")
    print(f"{len(state)} tensors; frozen hash {bytes(frozen).hex()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgfc",
        description="Desk-scale multi-granularity feature calibration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train the tuners, fusion, QFM, and head")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", default="target", choices=["source", "target"])
    p.add_argument("--out", help="directory for report.csv and figures")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--corrupt", help="test hook: corrupt a backward rule")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="list a checkpoint's tensors")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command != "gradcheck":
            _apply_precision()
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, IntegrityError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MgfcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILURE


if __name__ == "__main__":
    sys.exit(main())
