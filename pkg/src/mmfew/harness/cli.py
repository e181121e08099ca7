"""Command-line interface: train / eval / report.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure. Failures print a machine-readable JSON object to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from ..algorithms import NonFiniteLoss, SplitViolation
from ..checkpoint import CheckpointError
from ..episodes import EpisodeError
from ..mmfs import DatasetError
from .config import ConfigError, ExperimentConfig
from .evaluation import run_eval
from .report import MissingRuns, run_report
from .train import run_train


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algo", dest="algorithm",
                   choices=("maml", "fumi", "protonet", "am3", "am3-zero"))
    p.add_argument("--ways", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset directory/manifest, or 'synthetic'")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--grad-mode", dest="grad_mode", choices=("first", "second"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--outer-lr", dest="outer_lr", type=float)
    p.add_argument("--val-every", dest="val_every", type=int)
    p.add_argument("--val-tasks", dest="val_tasks", type=int)


def _build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = v
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmfew",
        description="Multi-modal few-shot meta-learning: train, evaluate, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one (config, seed) run")
    _add_train_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint path (config.json beside it)")
    p_eval.add_argument("--episodes", type=int, default=1000)
    p_eval.add_argument("--query-per-class", dest="query_per_class", type=int, default=20)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--algo", dest="algorithm",
                        help="fail unless the checkpoint was trained with this algorithm")
    p_eval.add_argument("--out", dest="out_path", help="result.json destination")

    p_report = sub.add_parser("report", help="aggregate results into table, CSV and figure")
    p_report.add_argument("runs", nargs="+", help="run directories (scanned for result.json)")
    p_report.add_argument("--out", dest="out_dir", default="report")
    p_report.add_argument("--strict", action="store_true",
                          help="error on missing (algo, shots) cells instead of printing '-'")
    p_report.add_argument("--no-figure", action="store_true")
    return parser


def _run(args) -> int:
    if args.command == "train":
        out = run_train(_build_config(args))
        print(json.dumps(out))
        return 0
    if args.command == "eval":
        result = run_eval(
            args.ckpt,
            episodes=args.episodes,
            query_per_class=args.query_per_class,
            seed=args.seed,
            expect_algo=args.algorithm,
            out_path=args.out_path,
        )
        summary = {k: v for k, v in result.items() if k != "per_task_acc"}
        print(json.dumps(summary))
        return 0
    if args.command == "report":
        artifacts = run_report(args.runs, args.out_dir, strict=args.strict,
                               figure=not args.no_figure)
        print(artifacts["table"], end="")
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def _fail(exc: Exception, code: int) -> int:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except ConfigError as e:
        return _fail(e, 2)
    except (DatasetError, EpisodeError, CheckpointError, MissingRuns,
            SplitViolation, FileNotFoundError) as e:
        return _fail(e, 3)
    except (NonFiniteLoss, FloatingPointError) as e:
        return _fail(e, 4)


if __name__ == "__main__":
    sys.exit(main())
