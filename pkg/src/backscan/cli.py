"""Command-line interface.

Each subcommand wraps a single plan stage, so one-off commands and full plan
files share the same execution and checkpointing path. Exit codes: 0 on
success, 2 on validation errors, 3 on stage failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .harness import ExperimentPlan, PlanError, emit_report, run_plan
from .scanner import SCANNER_CLASSES

logger = logging.getLogger("backscan")


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="global seed")
    parser.add_argument("--out", default="runs/cli", help="output directory")
    parser.add_argument("--workers", type=int, default=1,
                        help="parallel scans inside a campaign")
    parser.add_argument("--config", default=None,
                        help="YAML file with extra stage options")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backscan",
                                     description="Backdoor scanning and hardening "
                                                 "toolkit for small image classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a clean classifier")
    p.add_argument("--architecture", default="plainconv")
    p.add_argument("--dataset", default="synthetic-shapes-10")
    _add_common(p)

    p = sub.add_parser("poison", help="train a model with an injected backdoor")
    p.add_argument("--kind", default="patch")
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--architecture", default="plainconv")
    p.add_argument("--dataset", default="synthetic-shapes-10")
    _add_common(p)

    p = sub.add_parser("scan", help="invert triggers against a model")
    p.add_argument("--model", required=True, help="model path (without extension)")
    p.add_argument("--classes", default="GenL0-patch",
                   help=f"comma list from {','.join(SCANNER_CLASSES)}")
    p.add_argument("--mode", choices=("universal", "label-specific"),
                   default="universal")
    p.add_argument("--targets", default=None, help="comma list of target labels")
    p.add_argument("--dataset", default="synthetic-shapes-10")
    _add_common(p)

    p = sub.add_parser("harden", help="adversarially re-train against inverted triggers")
    p.add_argument("--model", required=True)
    p.add_argument("--scanner", choices=("GenL0-patch", "FeatureL2"),
                   default="GenL0-patch")
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--dataset", default="synthetic-shapes-10")
    _add_common(p)

    p = sub.add_parser("defend", help="run a defense baseline")
    p.add_argument("--model", required=True)
    p.add_argument("--defense", choices=("strip", "activation-clustering",
                                         "fine-prune"), default="strip")
    p.add_argument("--trigger", default=None, help="trigger archive for strip")
    p.add_argument("--dataset", default="synthetic-shapes-10")
    _add_common(p)

    p = sub.add_parser("transfer", help="evaluate triggers across models")
    p.add_argument("--source-models", required=True, help="comma list of model paths")
    p.add_argument("--eval-models", required=True, help="comma list of model paths")
    p.add_argument("--scanner", default="GenL0-patch")
    p.add_argument("--targets", default="3")
    p.add_argument("--dataset", default="synthetic-shapes-10")
    _add_common(p)

    p = sub.add_parser("report", help="aggregate scan report JSONs")
    p.add_argument("reports", nargs="+", help="scan report JSON files")
    p.add_argument("--format", default="json,csv", help="json,csv,plots")
    _add_common(p)

    p = sub.add_parser("run", help="execute a plan file")
    p.add_argument("plan", help="YAML plan file")
    p.add_argument("--out", default=None, help="override the plan's output directory")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    return parser


def _extra(args) -> dict:
    if not args.config:
        return {}
    doc = yaml.safe_load(Path(args.config).read_text())
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise PlanError("--config must contain a mapping")
    return doc


def _single_stage_plan(args, stage: dict) -> ExperimentPlan:
    stage.update(_extra(args))
    doc = {"seed": args.seed, "out": args.out,
           "dataset": getattr(args, "dataset", "synthetic-shapes-10"),
           "workers": args.workers, "stages": [stage]}
    return ExperimentPlan.from_dict(doc)


def _stage_for(args) -> dict:
    if args.command == "train":
        return {"stage": "train", "architecture": args.architecture}
    if args.command == "poison":
        return {"stage": "poison", "kind": args.kind, "target": args.target,
                "rate": args.rate, "architecture": args.architecture}
    if args.command == "scan":
        stage = {"stage": "scan", "model": args.model,
                 "scanner_classes": args.classes.split(","), "mode": args.mode}
        if args.targets:
            stage["targets"] = [int(t) for t in args.targets.split(",")]
        return stage
    if args.command == "harden":
        return {"stage": "harden", "model": args.model, "scanner": args.scanner,
                "rounds": args.rounds}
    if args.command == "defend":
        stage = {"stage": "defend", "model": args.model, "defense": args.defense}
        if args.trigger:
            stage["trigger"] = args.trigger
            stage["trigger_source"] = "scanner"
        return stage
    if args.command == "transfer":
        return {"stage": "transfer",
                "source_models": args.source_models.split(","),
                "eval_models": args.eval_models.split(","),
                "scanner": args.scanner,
                "targets": [int(t) for t in args.targets.split(",")]}
    raise PlanError(f"no stage mapping for {args.command}")


def _run_report(args) -> int:
    from .core import BackdoorVerdict
    from .scanner import ScanReport

    reports = []
    for path in args.reports:
        doc = json.loads(Path(path).read_text())
        verdict = BackdoorVerdict(asr=doc["asr"],
                                  regulation_distance=doc["regulation_distance"],
                                  bound=doc["bound"], valid=doc["valid"],
                                  target=doc["target"], victim=doc["victim"])
        reports.append(ScanReport(scanner_class=doc["scanner_class"],
                                  mode=doc["mode"], verdict=verdict,
                                  exact_l0=doc["exact_l0"],
                                  steps_run=doc["steps_run"], seed=doc["seed"],
                                  wall_seconds=doc["wall_seconds"],
                                  trigger_path=doc["trigger_path"]))
    files = emit_report(reports, formats=tuple(args.format.split(",")),
                        out_dir=args.out)
    for f in files:
        print(f)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            plan = ExperimentPlan.from_file(args.plan)
            if args.out:
                plan.out = Path(args.out)
            if args.workers is not None:
                plan.workers = args.workers
            if args.seed is not None:
                plan.seed = args.seed
            return run_plan(plan)
        if args.command == "report":
            return _run_report(args)
        plan = _single_stage_plan(args, _stage_for(args))
        return run_plan(plan)
    except (PlanError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
