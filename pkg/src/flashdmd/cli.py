"""Command-line entry point: ``flashdmd train | eval | ablate | export-samples``.

Exit codes: 0 success, 2 invalid config or arguments, 3 non-finite abort,
4 I/O failure, 5 checkpoint format version mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import ablation, trainer
from .checkpoint import CheckpointFormatError, CheckpointVersionError, load_checkpoint
from .config import ConfigError, from_dict, load_config
from .numerics import Rng

EXIT_OK, EXIT_CONFIG, EXIT_NAN, EXIT_IO, EXIT_VERSION = 0, 2, 3, 4, 5
OUT_ENV = "DMDFLASH_OUT"


def resolve_out(path: str | Path) -> Path:
    """Apply the ``DMDFLASH_OUT`` root: relative paths land under it, absolute paths keep
    only their final component."""
    p = Path(path)
    root = os.environ.get(OUT_ENV)
    if not root:
        return p
    return Path(root) / (p.name if p.is_absolute() else p)


def write_samples(path: Path, samples, cond) -> None:
    """``x0..x{d-1},condition`` with one data row per sample; condition -1 if unconditional."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = samples.shape[1]
        w.writerow([f"x{i}" for i in range(d)] + ["condition"])
        for i, row in enumerate(samples):
            c = -1 if cond is None else int(cond[i])
            w.writerow([repr(float(v)) for v in row] + [c])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = resolve_out(cfg.out_dir)
    try:
        trainer.run(cfg, out_dir=out, resume=args.resume)
    except trainer.TrainingAborted as exc:
        print(f"aborted: {exc}; diagnostic written to {out / 'diagnostic.json'}", file=sys.stderr)
        return EXIT_NAN
    print(f"done: {out}")
    return EXIT_OK


def _eval_dir(args) -> Path:
    return resolve_out(args.out) if args.out else Path(args.ckpt).resolve().parent


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    out = _eval_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    rec = trainer.evaluate(state, args.n)
    (out / "eval.json").write_text(json.dumps(rec.to_json(), sort_keys=True, indent=2) + "\n")
    samples, cond = trainer.generate(state, args.n, Rng(state.cfg.seed, trainer.STREAM_EVAL))
    write_samples(out / "samples.csv", samples, cond)
    print(json.dumps({k: v for k, v in rec.to_json().items() if not isinstance(v, dict)}, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    state = load_checkpoint(args.ckpt)
    out = _eval_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    samples, cond = trainer.generate(state, args.n, Rng(state.cfg.seed, trainer.STREAM_EVAL))
    write_samples(out / "samples.csv", samples, cond)
    print(out / "samples.csv")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.suite not in ablation.SUITES:
        print(f"unknown suite {args.suite!r}; choose from {', '.join(sorted(ablation.SUITES))}",
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        print(f"--seeds must be comma-separated integers, got {args.seeds!r}", file=sys.stderr)
        return EXIT_CONFIG
    if args.config:
        base = load_config(args.config)
    else:
        base = from_dict({"seed": 0, "train": {"max_iters": 2000}, "rl": {"iters": 2000}})
    out = resolve_out(args.out or Path(base.out_dir) / "ablate")
    try:
        res = ablation.run_suite(args.suite, base, seeds, log=print)
    except trainer.TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    per_seed, summary = ablation.write_tables(res, out)
    print(f"wrote {per_seed} and {summary}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flashdmd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="recompute metrics for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--n", type=int, default=10000)
    e.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run a canned ablation suite")
    a.add_argument("--suite", required=True)
    a.add_argument("--seeds", default=",".join(str(s) for s in ablation.DEFAULT_SEEDS))
    a.add_argument("--config", help="base config (default: built-in defaults, 2000 iterations)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-samples", help="write generator samples as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--n", type=int, default=10000)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except yaml.YAMLError as exc:
        print(f"config error: malformed YAML: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointVersionError as exc:
        print(f"checkpoint version mismatch: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (CheckpointFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
