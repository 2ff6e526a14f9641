"""Command-line interface over a run directory.

    syntaxmt prepare --config exp.json            # or --run_dir DIR + flags
    syntaxmt train --run DIR [--steps 3000 ...]
    syntaxmt translate --run DIR --input src.txt
    syntaxmt parse --run DIR --input src.txt --output pred.conllu
    syntaxmt evaluate --run DIR [--split test]
    syntaxmt attn-hist --run DIR [--first-n 100]
    syntaxmt report --run DIR

Every RunConfig key can be given as ``--<key> VALUE``. Failures print one
line ``error: <category>: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .corpus import CorpusFormatError
from .runs import (
    ConfigError,
    InputError,
    Run,
    RunConfig,
    attn_hist_run,
    evaluate_run,
    parse_run,
    prepare,
    report_run,
    train_run,
    translate_run,
)
from .training import TrainingDiverged

EXIT_CODES = {"config": 2, "input": 3, "data": 4, "training": 5, "internal": 1}


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        g.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", default=None, metavar=str(f.type).upper())


def _overrides(args) -> dict:
    return {
        k[len("cfg_"):]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="syntaxmt", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build vocabulary and data splits")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--force", action="store_true", help="overwrite a conflicting run directory")
    _add_overrides(p)

    p = sub.add_parser("train", help="train a model in a prepared run directory")
    p.add_argument("--run", required=True)
    _add_overrides(p)

    p = sub.add_parser("translate", help="greedy-decode sentences")
    p.add_argument("--run", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--task", help="task kind whose ID token to append (alternating models)")

    p = sub.add_parser("parse", help="predict heads from the supervised attention head")
    p.add_argument("--run", required=True)
    p.add_argument("--input", required=True, help="plain text or .conllu")
    p.add_argument("--output", required=True)

    p = sub.add_parser("evaluate", help="BLEU and parse metrics on a prepared split")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))

    p = sub.add_parser("attn-hist", help="encoder attention histograms")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--first-n", type=int, default=100)

    p = sub.add_parser("report", help="consolidate metrics.jsonl into series files")
    p.add_argument("--run", required=True)
    return parser


def _dump(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def run_command(args) -> None:
    cmd = args.command
    if cmd == "prepare":
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = cfg.override(_overrides(args))
        _dump(prepare(cfg, force=args.force))
    elif cmd == "train":
        run = Run.open(args.run, _overrides(args))
        result = train_run(run)
        _dump({"steps": len(result.history), "final": result.evals[-1] if result.evals else result.history[-1],
               "examples_by_task": result.examples_by_task})
    elif cmd == "translate":
        hyps = translate_run(Run.open(args.run), args.input, args.task)
        text = "".join(h + "\n" for h in hyps)
        if args.output:
            Path(args.output).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    elif cmd == "parse":
        n = parse_run(Run.open(args.run), args.input, args.output)
        _dump({"sentences": n, "output": args.output})
    elif cmd == "evaluate":
        _dump(evaluate_run(Run.open(args.run), args.split))
    elif cmd == "attn-hist":
        _dump(attn_hist_run(Run.open(args.run), args.split, args.first_n))
    elif cmd == "report":
        if not (Path(args.run) / "metrics.jsonl").exists():
            raise InputError(f"no metrics log in {args.run}")
        try:
            _dump(report_run(args.run))
        except ValueError as exc:
            raise InputError(str(exc)) from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_command(args)
    except (ConfigError, InputError) as exc:
        return _fail(exc.category, exc)
    except (CorpusFormatError, FileNotFoundError) as exc:
        return _fail("data" if isinstance(exc, CorpusFormatError) else "input", exc)
    except TrainingDiverged as exc:
        return _fail("training", exc)
    return 0


def _fail(category: str, exc: Exception) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {category}: {msg}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
