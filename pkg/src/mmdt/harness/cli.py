"""``mmdt`` command line: train, sample, verify, bench."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..conditioning import TASK_KINDS
from ..errors import FormatError, ParameterError, TrainingError
from .config import RunConfig

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NONFINITE = 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.data.seed = args.seed
    if getattr(args, "task", None):
        cfg.data.task = args.task
    return cfg


def cmd_train(args) -> int:
    from .drivers import run_train
    cfg = _load_config(args)
    out = Path(args.out or "run")
    try:
        res = run_train(cfg, out, resume=args.checkpoint, steps=args.steps)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    last = res.losses[-1].total if res.losses else float("nan")
    print(f"trained to step {res.step}; last loss {last!r}; metrics {res.metrics_path}; "
          f"checkpoint {res.checkpoint_path}")
    return 0


def cmd_sample(args) -> int:
    from .drivers import run_sample
    if not args.checkpoint:
        print("error: sample needs --checkpoint", file=sys.stderr)
        return EXIT_USAGE
    cfg = _load_config(args)
    out = Path(args.out or "sample.mmdt")
    _, _, meta = run_sample(cfg, args.checkpoint, out, task=args.task, steps=args.steps, seed=args.seed)
    print(f"wrote {out} ({', '.join(f'{k}={v}' for k, v in meta.items())})")
    return 0


def cmd_verify(args) -> int:
    from .verify import format_report, run_checks
    results = run_checks(args.inject_fault or ())
    print(format_report(results))
    return 0 if all(ok for _, ok, _ in results) else EXIT_FAILURE


def cmd_bench(args) -> int:
    from .drivers import run_bench
    out = Path(args.out or "bench.csv")
    rows = run_bench(out, seed=args.seed or 0)
    best = max(r["reduction"] for r in rows)
    print(f"wrote {len(rows)} rows to {out}; best FLOP reduction {best:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run config")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--out", metavar="PATH")
    common.add_argument("--checkpoint", metavar="PATH")
    common.add_argument("--steps", type=int, metavar="N")
    common.add_argument("--task", choices=TASK_KINDS)

    p = argparse.ArgumentParser(prog="mmdt", description="Desk-scale joint video/audio diffusion transformer.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train on synthetic data; --checkpoint resumes")
    sub.add_parser("sample", parents=[common], help="Euler-sample latents from a checkpoint")
    v = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    v.add_argument("--inject-fault", action="append", metavar="NAME",
                   help="debug mutation to apply (text-xattn-sign)")
    sub.add_parser("bench", parents=[common], help="write the sparse-attention FLOP ledger CSV")
    return p


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "verify": cmd_verify, "bench": cmd_bench}


def main(argv=None) -> int:
    from .drivers import apply_thread_cap
    args = build_parser().parse_args(argv)
    apply_thread_cap()
    try:
        return COMMANDS[args.command](args)
    except (FormatError, ParameterError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
