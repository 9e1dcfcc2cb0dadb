"""Command-line front end.

Every subcommand reads one JSON config in the experiment-plan format (see
``atlasground.experiments``), writes only under ``--out``, echoes the
resolved config to ``<out>/config.json`` and records a ``manifest.json``.
Exit codes: 0 success, 1 usage error (nothing written), 2 runtime failure.
The log level comes from ``ATLASGROUND_LOG_LEVEL`` (default WARNING);
``-v`` / ``-q`` shift it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .atlas import AtlasError, save_atlas
from .corpus import CorpusError, save_corpus
from .experiments import (
    EXPERIMENTS,
    ExperimentError,
    ExperimentPlan,
    TRAINED_KINDS,
    Workspace,
    benchmark_plan,
    build_atlas,
    run_plan,
)
from .reportio import RunManifest, write_summary
from .training import TrainingError, train, write_run_dir

LOG_ENV = "ATLASGROUND_LOG_LEVEL"
SUBCOMMANDS = ("generate-atlas", "generate-corpus", "train", "evaluate", "ablate", "retrieve", "run-plan")
RUNTIME_ERRORS = (ExperimentError, TrainingError, AtlasError, CorpusError, ValueError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="atlasground", description="Map documents to points in a labeled 3D organ atlas.")
    parser.add_argument("--version", action="version", version=f"atlasground {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    helps = {
        "generate-atlas": "write the plan's atlas (meta.json + labels.raw)",
        "generate-corpus": "write the plan's corpus and its train/val/test split as JSON lines",
        "train": "train one plan method and write its checkpoint and history",
        "evaluate": "run the general grounding comparison",
        "ablate": "run the (gamma_p, gamma_o, N) ablation grid",
        "retrieve": "run the Recall@K retrieval comparison",
        "run-plan": "run every experiment listed in the plan",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", type=Path, help="plan JSON (default: the shipped synthetic benchmark)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the plan seed")
        p.add_argument("-v", "--verbose", action="count", default=0)
        p.add_argument("-q", "--quiet", action="count", default=0)
        if name == "train":
            p.add_argument("--method", help="plan method name (default: first trainable method)")
    return parser


def _configure_logging(verbose: int, quiet: int) -> None:
    name = os.environ.get(LOG_ENV, "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        raise UsageError(f"{LOG_ENV}={name!r} is not a log level")
    level = min(max(level - 10 * verbose + 10 * quiet, logging.DEBUG), logging.CRITICAL)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _load_plan(args) -> ExperimentPlan:
    if args.config is None:
        plan = benchmark_plan()
    else:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            d = json.loads(args.config.read_text())
            plan = ExperimentPlan.from_dict(d, args.config.parent)
        except (json.JSONDecodeError, ExperimentError, TrainingError, TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"invalid config {args.config}: {exc}") from None
    if args.seed is not None:
        plan.seed = args.seed
    for src in (plan.atlas, plan.corpus):
        if isinstance(src, Path) and not src.exists():
            raise UsageError(f"input not found: {src}")
    return plan


def _inputs(args, plan: ExperimentPlan) -> dict:
    inputs = {}
    if args.config is not None:
        inputs["config"] = args.config
    for key in ("atlas", "corpus"):
        src = getattr(plan, key)
        if isinstance(src, Path):
            inputs[key] = src
    return inputs


def _write_config(out: Path, plan: ExperimentPlan, extra: dict | None = None) -> None:
    resolved = plan.to_dict()
    resolved["resolved_train_config"] = plan.base_config().to_dict()
    resolved.update(extra or {})
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _cmd_generate_atlas(plan, out: Path) -> None:
    save_atlas(build_atlas(plan), out / "atlas")


def _cmd_generate_corpus(plan, out: Path) -> None:
    ws = Workspace(plan)
    save_corpus(ws.docs, out / "corpus.jsonl")
    for name, docs in (("train", ws.train), ("val", ws.val), ("test", ws.test)):
        save_corpus(docs, out / f"{name}.jsonl")


def _train_method(plan, method: str | None):
    trainable = [m for m in plan.methods if m.kind in TRAINED_KINDS]
    chosen = next((m for m in trainable if m.name == method), None) if method else (trainable[0] if trainable else None)
    if chosen is None:
        raise UsageError(f"no trainable method {method!r} in plan" if method else "plan has no trainable method")
    return chosen


def _cmd_train(plan, out: Path, chosen) -> dict:
    ws = Workspace(plan)
    cfg = plan.base_config().with_overrides({**chosen.train, "objective": chosen.kind, "mode": "supervised"})
    model, history = train(None, ws.train, ws.val, ws.atlas, cfg)
    write_run_dir(out / "run", cfg, model, history)
    return {"method": chosen.name}


def _run_experiments(plan, out: Path, names) -> None:
    plan.experiments = list(names)
    tables = run_plan(plan, out)
    write_summary(tables.values(), out / "summary.md", title=f"{plan.name}: {', '.join(names)}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("atlasground: a subcommand is required (see --help)")
        _configure_logging(args.verbose, args.quiet)
        plan = _load_plan(args)
        chosen = _train_method(plan, args.method) if args.command == "train" else None
        if args.out.exists() and not args.out.is_dir():
            raise UsageError(f"--out exists and is not a directory: {args.out}")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1

    out: Path = args.out
    try:
        manifest = RunManifest.start(plan.base_config().config_hash(), plan.seed, _inputs(args, plan))
        out.mkdir(parents=True, exist_ok=True)
        extra = {"command": args.command}
        if args.command == "generate-atlas":
            _cmd_generate_atlas(plan, out)
        elif args.command == "generate-corpus":
            _cmd_generate_corpus(plan, out)
        elif args.command == "train":
            extra.update(_cmd_train(plan, out, chosen))
        elif args.command == "evaluate":
            _run_experiments(plan, out, ["general"])
        elif args.command == "ablate":
            _run_experiments(plan, out, ["ablation"])
        elif args.command == "retrieve":
            _run_experiments(plan, out, ["retrieval"])
        else:
            _run_experiments(plan, out, [e for e in plan.experiments if e in EXPERIMENTS])
        _write_config(out, plan, extra)
        manifest.write(out / "manifest.json")
    except RUNTIME_ERRORS as exc:
        logging.getLogger("atlasground").debug("failure", exc_info=True)
        print(f"atlasground {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
