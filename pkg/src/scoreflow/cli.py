"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 missing prerequisite, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl

EXIT_OK, EXIT_USAGE, EXIT_PREREQ, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="work directory (corpus, checkpoints, systems, reports)")
    common.add_argument("--mode", choices=("flow1", "flow2"))
    common.add_argument("--ode-steps", type=int, dest="ode_steps")
    common.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="scoreflow", description="Score-to-singing token pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    b = sub.add_parser("build-corpus", parents=[common], help="render the synthetic corpus")
    b.add_argument("--force", action="store_true", help="overwrite an existing corpus")
    b.add_argument("--n-utts", type=int, dest="n_utts")
    b.add_argument("--n-singers", type=int, dest="n_singers")
    sub.add_parser("train-codec", parents=[common], help="fit the RVQ tokenizer")
    sub.add_parser("train-lm", parents=[common], help="train the token language model")
    sub.add_parser("train-flow", parents=[common], help="train the flow-matching mel generator")
    s = sub.add_parser("synthesize", parents=[common], help="score(s) -> waveform")
    s.add_argument("score", nargs="?", help="score JSON (omit with --split)")
    s.add_argument("--singer-id", type=int, dest="singer_id")
    s.add_argument("--split", choices=("train", "dev", "test"))
    s.add_argument("--resynthesis", action="store_true", help="codec encode/decode of references instead")
    e = sub.add_parser("evaluate", parents=[common], help="score a system against references")
    e.add_argument("--split", choices=("train", "dev", "test"), default="test")
    e.add_argument("--system", help="systems/<name> directory to score (default: the --mode)")
    sub.add_parser("report", parents=[common], help="summarise every evaluation")
    return p


def resolve_config(args):
    overrides = dict(args.set)
    for key in ("seed", "mode", "ode_steps", "n_utts", "n_singers"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.out is not None:
        overrides["work_dir"] = args.out
    text = args.config.read_text() if args.config else ""
    return pl.PipelineConfig.from_text(text, overrides)


def run(args):
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "build-corpus":
        m = pl.cmd_build_corpus(cfg, force=args.force)
        print(f"wrote {len(m.records)} utterances to {cfg.corpus_dir}")
    elif cmd == "train-codec":
        pl.cmd_train_codec(cfg)
        print(f"wrote {cfg.ckpt_dir / pl.STAGE_FILES['codec']}")
    elif cmd == "train-lm":
        pl.cmd_train_lm(cfg)
        print(f"wrote {cfg.ckpt_dir / pl.STAGE_FILES['lm']}")
    elif cmd == "train-flow":
        pl.cmd_train_flow(cfg)
        print(f"wrote {cfg.ckpt_dir / pl.STAGE_FILES[cfg.mode]}")
    elif cmd == "synthesize":
        out = pl.cmd_synthesize(cfg, args.score, args.singer_id, args.split, args.resynthesis)
        print(f"wrote {out}")
    elif cmd == "evaluate":
        report, path = pl.cmd_evaluate(cfg, args.system or cfg.mode, args.split)
        agg = report.aggregates()
        print(f"wrote {path}")
        for m in ("f0_rmse", "f0_corr", "mcd"):
            mean = agg[m]["mean"]
            print(f"  {m:8s} {'n/a' if mean is None else f'{mean:.4f}'}  (n={agg[m]['count']})")
    elif cmd == "report":
        print(f"wrote {pl.cmd_report(cfg)}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except pl.UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pl.PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        logging.getLogger("scoreflow").debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
