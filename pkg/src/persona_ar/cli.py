"""Command-line entry point: ``persona-ar <command> [--key value ...]``.

Every RunConfig field is accepted as ``--<field> VALUE``; values from
``--config FILE`` are applied first and flags win.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import TOGGLES, RunConfig, format_config, load_run_config
from .data import DataError, load_sessions
from .model import count_parameters
from .optim import LRFinderDiverged, NonFiniteGradient
from .train import (
    NumericFailure, format_ablation_table, prepare_trainer, run_ablation, run_eval, run_generate, run_lr_find, run_train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for key in RunConfig().to_flat():
        p.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="VALUE")


def _run_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        return load_run_config(args.config, overrides)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="persona-ar", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a session file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", help="session file (defaults to the checkpoint's test_path)")
    p.add_argument("--config", help="reject the checkpoint if its model settings differ from this file")
    p.add_argument("--out", help="write the metrics report here")

    p = sub.add_parser("ablate", help="train/evaluate AR+ and one-toggle-off variants")
    _add_config_flags(p)
    p.add_argument("--toggle", action="append", choices=TOGGLES + ("all",), required=True)
    p.add_argument("--out", help="write the side-by-side table here")

    p = sub.add_parser("generate", help="sample one response per session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sessions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("lr-find", help="LR range test")
    _add_config_flags(p)
    p.add_argument("--lr-min", type=float, default=1e-7)
    p.add_argument("--lr-max", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", help="two-column lr / smoothed-loss file")

    p = sub.add_parser("count-params", help="analytic parameter counts")
    _add_config_flags(p)
    return parser


def _sessions(path: str, what: str, require_response: bool = True):
    if not path:
        raise UsageError(f"no {what} file given")
    return load_sessions(path, require_response)


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def dispatch(args) -> int:
    if args.command == "count-params":
        cfg = _run_config(args)
        _write(None, json.dumps(count_parameters(cfg.model), indent=2) + "\n")
    elif args.command == "train":
        cfg = _run_config(args)
        train = _sessions(cfg.train_path, "training")
        valid = load_sessions(cfg.valid_path) if cfg.valid_path else None
        trainer = prepare_trainer(cfg, train)
        print(json.dumps(count_parameters(trainer.cfg.model)), flush=True)
        run_train(cfg, train, valid, trainer=trainer)
        out = Path(cfg.output_dir)
        (out / "config.txt").write_text(format_config(trainer.cfg), encoding="utf-8")
        print(f"wrote {out / 'checkpoint.bin'} after {trainer.step} steps")
    elif args.command == "eval":
        from .checkpoint import load_checkpoint

        ckpt = load_checkpoint(args.checkpoint)
        test_path = args.test or ckpt.header["config"].get("test_path")
        expected = None
        if args.config:
            try:
                expected = load_run_config(args.config)
            except (KeyError, ValueError, TypeError) as exc:
                raise UsageError(str(exc)) from exc
        report = run_eval(ckpt, _sessions(test_path, "test"), expected)
        _write(args.out, report.to_text())
    elif args.command == "ablate":
        cfg = _run_config(args)
        toggles = TOGGLES if "all" in args.toggle else tuple(dict.fromkeys(args.toggle))
        train = _sessions(cfg.train_path, "training")
        test = _sessions(cfg.test_path or cfg.valid_path, "test")
        valid = load_sessions(cfg.valid_path) if cfg.valid_path else None
        _write(args.out, format_ablation_table(run_ablation(cfg, toggles, train, test, valid)))
    elif args.command == "generate":
        sessions = _sessions(args.sessions, "session", require_response=False)
        responses = run_generate(args.checkpoint, sessions, args.seed)
        _write(args.out, "".join(r + "\n" for r in responses))
    elif args.command == "lr-find":
        cfg = _run_config(args)
        curve = run_lr_find(cfg, _sessions(cfg.train_path, "training"), args.lr_min, args.lr_max, args.steps)
        _write(args.out, curve.to_text())
        print(f"suggested lr {curve.suggestion:.3g} (steepest descent at {curve.steepest:.3g})")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NonFiniteGradient, LRFinderDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
