"""Command line entry point: ``advimmu gen-data|train|cluster|eval|infer``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runs
from .config import load_config
from .synth import ConfigError, DatasetError
from .tensor import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _print_rows(rows) -> None:
    for r in rows:
        print(f"{r['split']:>12}  mIoU {r['mIoU']:7.2f}  mPre {r['mPre']:7.2f}  mRec {r['mRec']:7.2f}  mF1 {r['mF1']:7.2f}")


def cmd_gen_data(cfg, args) -> None:
    summary = runs.gen_data(cfg, args.out)
    print(f"wrote {len(summary['sequences'])} sequences to {args.out or cfg.paths.dataset}")
    for tag, n in summary["weather_counts"].items():
        print(f"  {tag}: {n}")


def cmd_train(cfg, args) -> None:
    result = runs.train(cfg)
    if result.val_metrics:
        print(f"final val mIoU {result.val_metrics['mIoU']:.2f}")
    print(f"run written to {result.run_dir}")


def cmd_cluster(cfg, args) -> None:
    rep = runs.cluster(cfg, require_masks=args.require_masks)
    print(f"sbicac: {rep['iterations']} iterations, converged={rep['converged']}")
    print(f"mapped mIoU per-class-max {rep['per_class_max_miou']:.2f}  bijective {rep['bijective_miou']:.2f}")


def cmd_eval(cfg, args) -> None:
    run_dir = Path(cfg.paths.run_dir)
    out = args.out or run_dir / "eval.csv"
    per_frame = args.per_frame_out or (run_dir / "eval_frames.csv" if cfg.eval.per_frame else None)
    rows = runs.evaluate(cfg, checkpoint=args.checkpoint, out_path=out, per_frame_path=per_frame)
    _print_rows(rows)


def cmd_infer(cfg, args) -> None:
    out = runs.infer(cfg, checkpoint=args.checkpoint, out_dir=args.out)
    print(f"predictions written to {out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "cluster": cmd_cluster,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advimmu", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set unfold.K=2 (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("gen-data", "eval", "infer"):
            p.add_argument("--out", help="output location (defaults from the config paths)")
        if name in ("eval", "infer"):
            p.add_argument("--checkpoint", help="checkpoint directory (default <run_dir>/checkpoint)")
        if name == "eval":
            p.add_argument("--per-frame-out", help="also write one metrics row per frame here")
        if name == "cluster":
            p.add_argument("--require-masks", action="store_true", help="fail instead of generating missing masks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", force=True)
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (runs.NumericError, NonFiniteError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
