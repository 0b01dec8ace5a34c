"""Experiment orchestration: transfer matrices, reports, and plan runner.

A plan is a YAML file with a seed, an output directory, a dataset, and an
ordered list of stages (train / poison / scan / harden / defend / transfer /
report). Every stage checkpoints its artifacts and is skipped on re-runs,
so a completed plan is a no-op to execute again.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .core import ClassifierHandle, ImageSet, attack_success_rate, evaluate_accuracy
from .defenses import (DefenseReport, activation_clustering, fine_prune, harden,
                       strip_far)
from .scanner import (ScanReport, desk_profile, draw_label_plan, invert_trigger,
                      preset, run_campaign, campaign_summary)
from .triggers import load_trigger
from .zoo import (DatasetSplits, TrainConfig, TrainingFailure, load_encoder_pair,
                  load_model, provision_dataset, save_encoder_pair, save_model,
                  train_autoencoder, train_classifier)

logger = logging.getLogger(__name__)

__all__ = [
    "PlanError",
    "StageFailure",
    "ExperimentPlan",
    "transfer_matrix",
    "emit_report",
    "run_plan",
]

REPORT_SCHEMA = "backscan-report-v1"
STAGE_KINDS = ("train", "poison", "scan", "harden", "defend", "transfer", "report")


class PlanError(ValueError):
    """The plan file is malformed or inconsistent."""


class StageFailure(RuntimeError):
    """A stage ran and failed; earlier artifacts are preserved."""


# ---------------------------------------------------------------------------
# Transferability


def transfer_matrix(triggers: Sequence, models: Sequence[ClassifierHandle],
                    data: ImageSet, source_ids: Optional[Sequence[Sequence[str]]] = None
                    ) -> dict:
    """ASR of each trigger on each model, with source models flagged.

    *triggers* are ScanReports (trigger plus target/victim) or objects with
    ``trigger``/``verdict`` attributes; all models must share a dataset.
    """
    datasets = {m.meta.dataset for m in models}
    if len(datasets) > 1:
        raise ValueError(f"models span multiple datasets: {sorted(datasets)}")
    model_ids = [f"{m.meta.architecture}:{m.meta.provenance}" for m in models]
    rows = []
    asr = np.zeros((len(triggers), len(models)))
    flags = np.zeros((len(triggers), len(models)), dtype=bool)
    for i, entry in enumerate(triggers):
        trig = entry.trigger
        target = entry.verdict.target
        victim = entry.verdict.victim
        sources = list(source_ids[i]) if source_ids is not None else \
            (entry.model_id.split("+") if entry.model_id else [])
        rows.append({"scanner_class": entry.scanner_class, "target": target,
                     "victim": victim, "sources": sources})
        for j, model in enumerate(models):
            asr[i, j] = attack_success_rate(model, trig, data, target, victim)
            flags[i, j] = model_ids[j] in sources
    cross = asr[~flags]
    return {
        "models": model_ids,
        "triggers": rows,
        "asr": asr.round(6).tolist(),
        "source_flags": flags.tolist(),
        "cross_model_mean": float(cross.mean()) if cross.size else None,
    }


# ---------------------------------------------------------------------------
# Report emission


def _report_doc(report) -> dict:
    """Deterministic aggregate row: verdict fields only, no wall time."""
    doc = report.to_json_doc()
    doc.pop("wall_seconds", None)
    if getattr(report, "model_id", None) is not None:
        doc["model"] = report.model_id
    return doc


def _aggregate(reports: Sequence[ScanReport]) -> dict:
    groups: dict = {}
    for r in reports:
        g = groups.setdefault(r.scanner_class, {"scans": 0, "valid": 0, "asr": [],
                                                "distance": []})
        g["scans"] += 1
        g["valid"] += int(r.verdict.valid)
        g["asr"].append(r.verdict.asr)
        g["distance"].append(r.verdict.regulation_distance)
    summary = {}
    for cls in sorted(groups):
        g = groups[cls]
        summary[cls] = {
            "scans": g["scans"],
            "valid": g["valid"],
            "mean_asr": round(float(np.mean(g["asr"])), 6),
            "mean_distance": round(float(np.mean(g["distance"])), 6),
        }
    return {"schema": REPORT_SCHEMA, "count": len(reports), "summary": summary,
            "reports": [_report_doc(r) for r in reports]}


def emit_report(reports: Sequence[ScanReport], formats=("json",), out_dir=".") -> list:
    """Write aggregate artifacts; identical inputs give identical JSON bytes."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create report directory {out_dir}: {err}") from err
    if isinstance(formats, str):
        formats = (formats,)
    written = []
    agg = _aggregate(reports)
    for fmt in formats:
        if fmt == "json":
            path = out_dir / "report.json"
            path.write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
            written.append(path)
        elif fmt == "csv":
            path = out_dir / "report.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["scanner_class", "scans", "valid", "mean_asr",
                                 "mean_distance"])
                for cls, row in agg["summary"].items():
                    writer.writerow([cls, row["scans"], row["valid"],
                                     row["mean_asr"], row["mean_distance"]])
            written.append(path)
        elif fmt == "plots":
            written.extend(_plot_reports(reports, out_dir))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return written


def _plot_reports(reports, out_dir) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if not reports:
        return written
    by_class: dict = {}
    by_model: dict = {}
    for r in reports:
        by_class.setdefault(r.scanner_class, []).append(r.verdict.asr)
        by_model.setdefault(r.model_id or "model", []).append(r.verdict.asr)

    fig, ax = plt.subplots(figsize=(7, 4))
    names = sorted(by_class)
    ax.bar(range(len(names)), [float(np.mean(by_class[n])) for n in names])
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("mean ASR")
    ax.set_title("ASR by scanner class")
    fig.tight_layout()
    p1 = out_dir / "asr_by_class.png"
    fig.savefig(p1)
    plt.close(fig)
    written.append(p1)

    fig, ax = plt.subplots(figsize=(7, 4))
    names = sorted(by_model)
    ax.boxplot([by_model[n] for n in names], tick_labels=names)
    ax.set_ylabel("ASR")
    ax.set_title("ASR by model")
    fig.tight_layout()
    p2 = out_dir / "asr_by_model.png"
    fig.savefig(p2)
    plt.close(fig)
    written.append(p2)
    return written


# ---------------------------------------------------------------------------
# Plans


@dataclass
class ExperimentPlan:
    """Parsed plan file: global seed, output directory, dataset, stages."""

    seed: int
    out: Path
    dataset: str
    stages: list
    workers: int = 1
    dataset_seed: Optional[int] = None

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as err:
            raise PlanError(f"cannot read plan {path}: {err}") from err
        return cls.from_dict(doc, base=Path(path).parent)

    @classmethod
    def from_dict(cls, doc, base=Path(".")) -> "ExperimentPlan":
        if not isinstance(doc, dict):
            raise PlanError("plan must be a mapping")
        for key in ("seed", "out", "stages"):
            if key not in doc:
                raise PlanError(f"plan is missing the {key!r} key")
        stages = doc["stages"]
        if not isinstance(stages, list) or not stages:
            raise PlanError("plan needs a non-empty stage list")
        seen = set()
        for i, stage in enumerate(stages):
            kind = stage.get("stage")
            if kind not in STAGE_KINDS:
                raise PlanError(f"stage {i}: unknown kind {kind!r}")
            name = stage.get("name", kind)
            if name in seen:
                raise PlanError(f"stage {i}: duplicate name {name!r}")
            seen.add(name)
            for ref_key in ("model", "models", "source_models", "eval_models"):
                refs = stage.get(ref_key)
                if refs is None:
                    continue
                refs = [refs] if isinstance(refs, str) else refs
                for ref in refs:
                    # a reference is either an earlier stage name or a model path
                    if ref not in seen and "/" not in str(ref) and "\\" not in str(ref):
                        raise PlanError(f"stage {i}: reference {ref!r} does not "
                                        "precede its use")
        out = Path(doc["out"])
        if not out.is_absolute():
            out = base / out
        return cls(seed=int(doc["seed"]), out=out, dataset=doc.get(
            "dataset", "synthetic-shapes-10"), stages=stages,
            workers=int(doc.get("workers", 1)),
            dataset_seed=doc.get("dataset_seed"))


class _PlanContext:
    """Artifacts accumulated while a plan executes, reloadable on resume."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.dataset: DatasetSplits = provision_dataset(
            plan.dataset, seed=plan.dataset_seed if plan.dataset_seed is not None
            else plan.seed)
        self.models: dict = {}
        self.reports: dict = {}
        self.scan_reports: list = []
        self._encoder_pair = None
        self._profile = None

    def encoder_pair(self, stage_dir: Path):
        if self._encoder_pair is None:
            path = self.plan.out / "autoencoder.pt"
            if path.exists():
                self._encoder_pair = load_encoder_pair(path)
            else:
                self._encoder_pair = train_autoencoder(self.dataset,
                                                       seed=self.plan.seed)
                save_encoder_pair(self._encoder_pair, path)
        return self._encoder_pair

    def profile(self, stage_dir: Path, need_encoder: bool):
        pair = self.encoder_pair(stage_dir) if need_encoder else None
        if self._profile is None or (need_encoder and self._profile.encoder_id is None):
            self._profile = desk_profile(self.dataset, encoder_pair=pair,
                                         seed=self.plan.seed)
        return self._profile

    def model(self, name: str) -> ClassifierHandle:
        if name in self.models:
            return self.models[name]
        if Path(str(name)).with_suffix(".json").exists():
            self.models[name] = load_model(name)
            return self.models[name]
        raise PlanError(f"no model named {name!r} in this plan run")


def _stage_dir(plan: ExperimentPlan, index: int, stage: dict) -> Path:
    return plan.out / f"{index:02d}_{stage.get('name', stage['stage'])}"


def _marker(stage_dir: Path) -> Path:
    return stage_dir / "_done.json"


def _train_config(stage) -> TrainConfig:
    cfg = stage.get("config", {})
    return TrainConfig(**cfg) if cfg else TrainConfig()


def _scan_overrides(stage) -> dict:
    return {k: stage[k] for k in ("steps", "sample_count", "batch_size",
                                  "eval_every", "learning_rate", "asr_floor")
            if k in stage}


def _resolve_labels(stage, num_classes, mode, seed):
    if "targets" in stage:
        return [(int(t), None) for t in stage["targets"]]
    if "pairs" in stage:
        return [(int(t), int(v)) for t, v in stage["pairs"]]
    return draw_label_plan(num_classes, mode, seed)


def _run_stage(ctx: _PlanContext, index: int, stage: dict) -> dict:
    plan = ctx.plan
    kind = stage["stage"]
    name = stage.get("name", kind)
    stage_dir = _stage_dir(plan, index, stage)
    stage_dir.mkdir(parents=True, exist_ok=True)
    seed = int(stage.get("seed", plan.seed))
    artifacts: dict = {"stage": kind, "name": name}

    if kind == "train":
        handle = train_classifier(stage.get("architecture", "plainconv"),
                                  ctx.dataset, config=_train_config(stage), seed=seed)
        save_model(handle, stage_dir / "model")
        ctx.models[name] = handle
        artifacts["model"] = str(stage_dir / "model")
        artifacts["accuracy"] = handle.meta.accuracy

    elif kind == "poison":
        from .attacks import make_recipe, recipe_to_config, train_backdoored_model
        recipe = make_recipe(stage.get("kind", "patch"), int(stage.get("target", 0)),
                             float(stage.get("rate", 0.1)),
                             ctx.dataset.image_shape, seed=seed,
                             **stage.get("assets", {}))
        reference = None
        if stage.get("reference_model"):
            reference = ctx.model(stage["reference_model"]).meta.accuracy
        handle = train_backdoored_model(ctx.dataset, recipe,
                                        architecture=stage.get("architecture",
                                                               "plainconv"),
                                        config=_train_config(stage), seed=seed,
                                        clean_reference_accuracy=reference)
        save_model(handle, stage_dir / "model")
        (stage_dir / "recipe.yaml").write_text(recipe_to_config(recipe))
        ctx.models[name] = handle
        artifacts["model"] = str(stage_dir / "model")
        artifacts["accuracy"] = handle.meta.accuracy

    elif kind == "scan":
        model = ctx.model(stage["model"])
        classes = stage.get("scanner_classes", ["GenL0-patch"])
        need_encoder = any(c in ("GenL2", "FeatureL2") for c in classes)
        profile = ctx.profile(stage_dir, need_encoder)
        mode = stage.get("mode", "universal")
        label_plan = _resolve_labels(stage, model.num_classes, mode, seed)
        reports = run_campaign(model, ctx.dataset.test, profile, classes, mode=mode,
                               label_plan=label_plan, seed=seed,
                               out_dir=stage_dir / "triggers",
                               workers=plan.workers, **_scan_overrides(stage))
        for i, r in enumerate(reports):
            (stage_dir / f"scan_{i:03d}.json").write_text(r.to_json() + "\n")
        emit_report(reports, formats=("json",), out_dir=stage_dir)
        ctx.reports[name] = reports
        ctx.scan_reports.extend(reports)
        artifacts["reports"] = len(reports)
        artifacts["summary"] = campaign_summary(reports)

    elif kind == "harden":
        model = ctx.model(stage["model"])
        scanner_class = stage.get("scanner", "GenL0-patch")
        need_encoder = scanner_class == "FeatureL2"
        profile = ctx.profile(stage_dir, need_encoder)
        hardened = harden(model, ctx.dataset, profile, scanner_class=scanner_class,
                          rounds=int(stage.get("rounds", 2)), seed=seed,
                          targets=stage.get("targets"),
                          train_config=_train_config(stage),
                          scan_overrides=_scan_overrides(stage))
        save_model(hardened, stage_dir / "model")
        ctx.models[name] = hardened
        artifacts["model"] = str(stage_dir / "model")
        artifacts["accuracy"] = hardened.meta.accuracy

    elif kind == "defend":
        artifacts["report"] = _run_defense(ctx, stage, stage_dir, seed)

    elif kind == "transfer":
        sources = [ctx.model(n) for n in stage["source_models"]]
        evals = [ctx.model(n) for n in stage.get("eval_models", [])]
        scanner_class = stage.get("scanner", "GenL0-patch")
        need_encoder = scanner_class in ("GenL2", "FeatureL2")
        profile = ctx.profile(stage_dir, need_encoder)
        entries = []
        for ti, target in enumerate(stage.get("targets", [3])):
            config = preset(scanner_class, profile, target=int(target),
                            seed=seed + ti, **_scan_overrides(stage))
            entries.append(invert_trigger(sources, ctx.dataset.test, config))
        matrix = transfer_matrix(entries, sources + evals, ctx.dataset.test)
        (stage_dir / "transfer.json").write_text(
            json.dumps(matrix, indent=2, sort_keys=True) + "\n")
        artifacts["cross_model_mean"] = matrix["cross_model_mean"]

    elif kind == "report":
        formats = stage.get("formats", ["json", "csv", "plots"])
        files = emit_report(ctx.scan_reports, formats=formats, out_dir=stage_dir)
        artifacts["files"] = [str(f) for f in files]

    return artifacts


def _run_defense(ctx: _PlanContext, stage, stage_dir: Path, seed: int) -> dict:
    model = ctx.model(stage["model"])
    defense = stage.get("defense", "strip")
    test = ctx.dataset.test
    if defense == "strip":
        from .attacks import RecipeTrigger, recipe_from_config
        trigger_source = stage.get("trigger_source", "clean")
        if trigger_source == "clean":
            rng = np.random.default_rng(np.random.PCG64(seed))
            half = rng.permutation(len(test))
            clean = test.subset(half[: len(test) // 2])
            attack_images = test.images[half[len(test) // 2:]]
        elif "recipe" in stage:
            recipe = recipe_from_config(Path(stage["recipe"]).read_text())
            trig = RecipeTrigger(recipe, seed=seed)
            clean = test
            x, _ = test.tensors()
            attack_images = trig.apply_batch(x).permute(0, 2, 3, 1).numpy()
        else:
            trig = load_trigger(stage["trigger"])
            clean = test
            x, _ = test.tensors()
            attack_images = trig.apply_batch(x).permute(0, 2, 3, 1).numpy()
        far = strip_far(model, clean, attack_images, frr=float(stage.get("frr", 0.01)),
                        n_overlays=int(stage.get("n_overlays", 64)), seed=seed)
        report = DefenseReport(defense="strip", model_provenance=model.meta.provenance,
                               trigger_source=trigger_source, seed=seed, far=far,
                               frr=float(stage.get("frr", 0.01)))
    elif defense == "activation-clustering":
        scores = activation_clustering(model, test, seed=seed)
        report = DefenseReport(defense="activation-clustering",
                               model_provenance=model.meta.provenance,
                               trigger_source=stage.get("trigger_source", "clean"),
                               seed=seed,
                               silhouette_by_label={str(k): round(v, 6)
                                                    for k, v in scores.items()})
    elif defense == "fine-prune":
        acc_before = evaluate_accuracy(model, test)
        pruned = fine_prune(model, ctx.dataset.val,
                            float(stage.get("prune_fraction", 0.2)),
                            eval_set=test, seed=seed)
        save_model(pruned, stage_dir / "model")
        report = DefenseReport(defense="fine-prune",
                               model_provenance=model.meta.provenance,
                               trigger_source=stage.get("trigger_source", "clean"),
                               seed=seed, acc_before=acc_before,
                               acc_after=pruned.meta.accuracy)
    else:
        raise PlanError(f"unknown defense {defense!r}")
    (stage_dir / "defense.json").write_text(report.to_json() + "\n")
    return report.to_json_doc()


def run_plan(plan: ExperimentPlan) -> int:
    """Execute stages in order with checkpointing; 0 on success, 3 on failure.

    Completed stages (with a done marker) are reloaded, not re-run, so a
    finished plan is idempotent. A failing stage preserves everything before
    it and stops the run.
    """
    plan.out.mkdir(parents=True, exist_ok=True)
    ctx = _PlanContext(plan)
    for index, stage in enumerate(plan.stages):
        stage_dir = _stage_dir(plan, index, stage)
        marker = _marker(stage_dir)
        name = stage.get("name", stage["stage"])
        if marker.exists():
            artifacts = json.loads(marker.read_text())
            _reload_stage(ctx, stage, artifacts)
            logger.info("stage %d (%s) already complete, skipping", index, name)
            continue
        logger.info("running stage %d (%s)", index, name)
        try:
            artifacts = _run_stage(ctx, index, stage)
        except (TrainingFailure, ValueError, KeyError, OSError) as err:
            logger.error("stage %d (%s) failed: %s", index, name, err)
            (stage_dir / "_failed.txt").write_text(f"{type(err).__name__}: {err}\n")
            return 3
        marker.write_text(json.dumps(artifacts, indent=2, sort_keys=True,
                                     default=str) + "\n")
    return 0


def _reload_stage(ctx: _PlanContext, stage: dict, artifacts: dict) -> None:
    name = stage.get("name", stage["stage"])
    if artifacts.get("model"):
        ctx.models[name] = load_model(artifacts["model"])
