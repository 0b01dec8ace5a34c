"""Trigger inversion engine and scanner presets.

Eight scanner classes pair a trigger template with a regulation spec:
GenL0-{patch,dynamic,inputaware,composite} bound the number of changed
pixels, GenL2 bounds the pixel L2 of a pervasive change, GenLinf bounds the
maximum blend, FeatureL2 bounds the change in encoder features, FreeB
bounds the L1 spectral change. Inversion is gradient descent on the trigger
parameters under an adaptively weighted budget penalty; the best candidate
is picked on a held-out split (valid first, then ASR, then distance).
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field, replace, asdict
from typing import Optional, Sequence, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .core import (ASR_FLOOR, BackdoorVerdict, ClassifierHandle, ImageSet,
                   RegulationSpec)
from .losses import (LambdaController, ObjectiveConfig, bound_loss,
                     regulation_distance)
from .triggers import (ConstantGrid, ConvGenerator, FrequencyTrigger, ImageMixture,
                       LocalizedTrigger, PervasiveTrigger, SigmoidGrid,
                       get_encoder_pair, save_trigger)

__all__ = [
    "SCANNER_CLASSES",
    "DatasetProfile",
    "ScanConfig",
    "ScanReport",
    "preset",
    "desk_profile",
    "build_trigger",
    "invert_trigger",
    "run_campaign",
    "draw_label_plan",
    "TriggerInverter",
]

SCANNER_CLASSES = ("GenL0-patch", "GenL0-dynamic", "GenL0-inputaware",
                   "GenL0-composite", "GenL2", "GenLinf", "FeatureL2", "FreeB")

_GENERATOR_CLASSES = ("GenL0-dynamic", "GenL0-inputaware")
_CONV_CLASSES = ("GenL2", "FeatureL2")
_HARD_EVAL_CLASSES = ("GenL0-patch", "GenL0-dynamic", "GenL0-inputaware",
                      "GenL0-composite")


@dataclass
class DatasetProfile:
    """Image geometry, sampling protocol, and injected-reference bounds."""

    name: str
    image_shape: tuple                   # (H, W, C)
    sample_count: int
    generator_sample_count: int
    bounds: dict = field(default_factory=dict)
    encoder_id: Optional[str] = None

    def bound(self, key: str) -> float:
        if key not in self.bounds or self.bounds[key] is None:
            raise KeyError(f"profile {self.name!r} has no calibrated bound for "
                           f"{key!r}; calibrate or configure it")
        return float(self.bounds[key])


def builtin_profile(name: str) -> DatasetProfile:
    """Paper-scale sampling protocols; budget keys that need measurement on
    real data are left uncalibrated."""
    if name == "cifar":
        shape = (32, 32, 3)
        counts = (100, 5000)
    elif name == "imagenet":
        shape = (224, 224, 3)
        counts = (300, 2000)
    else:
        raise KeyError(f"unknown builtin profile {name!r}")
    h, w, _ = shape
    return DatasetProfile(name=name, image_shape=shape, sample_count=counts[0],
                          generator_sample_count=counts[1],
                          bounds={"pixel-l0": 0.06 * h * w,
                                  "composite-l0": 0.5 * h * w,
                                  "pixel-linf": 0.2,
                                  "pixel-l2": None,
                                  "feature-l2": None,
                                  "frequency-l1": None})


def desk_profile(dataset, encoder_pair=None, seed: int = 0,
                 sample_count: int = 100, generator_sample_count: int = 500,
                 calibration_samples: int = 64) -> DatasetProfile:
    """Desk-scale profile with budgets measured from injected attacks.

    The pixel-L2 budget comes from the warp attack, the feature-L2 and
    frequency-L1 budgets from the filter attack, measured on *dataset*.
    """
    from .attacks import make_recipe, measure_recipe_distance

    h, w, c = dataset.image_shape
    reference = dataset.test if hasattr(dataset, "test") else dataset
    warp = make_recipe("warp", target=0, poison_rate=0.0, image_shape=(h, w, c),
                       seed=seed)
    filt = make_recipe("filter", target=0, poison_rate=0.0, image_shape=(h, w, c),
                       seed=seed)
    bounds = {
        "pixel-l0": 0.06 * h * w,
        "composite-l0": 0.5 * h * w,
        "pixel-linf": 0.2,
        "pixel-l2": measure_recipe_distance(
            warp, reference, RegulationSpec("pixel", "L2", 1.0), seed=seed,
            sample_count=calibration_samples),
        "frequency-l1": measure_recipe_distance(
            filt, reference, RegulationSpec("frequency", "L1", 1.0, projection="dft"),
            seed=seed, sample_count=calibration_samples),
    }
    encoder_id = None
    if encoder_pair is not None:
        encoder_id = encoder_pair.encoder_id
        bounds["feature-l2"] = measure_recipe_distance(
            filt, reference,
            RegulationSpec("feature", "L2", 1.0, projection=encoder_id),
            encoder=encoder_pair.encoder, seed=seed,
            sample_count=calibration_samples)
    name = getattr(dataset, "name", "desk")
    return DatasetProfile(name=f"desk:{name}", image_shape=(h, w, c),
                          sample_count=sample_count,
                          generator_sample_count=generator_sample_count,
                          bounds=bounds, encoder_id=encoder_id)


@dataclass
class ScanConfig:
    """Everything one inversion run needs, echoed into its report."""

    scanner_class: str
    target: int
    spec: RegulationSpec
    mode: str = "universal"              # universal | label-specific
    victim: Optional[int] = None
    sample_count: int = 100
    steps: int = 1000
    learning_rate: float = 0.1
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    batch_size: int = 50
    eval_every: int = 50
    eval_fraction: float = 0.2
    encoder_id: Optional[str] = None
    donor_class: Optional[int] = None
    pretrain_steps: int = 100
    image_shape: Optional[tuple] = None

    def __post_init__(self):
        if self.scanner_class not in SCANNER_CLASSES:
            raise ValueError(f"unknown scanner class {self.scanner_class!r}")
        if self.mode not in ("universal", "label-specific"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "label-specific":
            if self.victim is None or self.victim == self.target:
                raise ValueError("label-specific scans need a victim class "
                                 "different from the target")
        if self.sample_count <= 0 or self.steps <= 0 or self.learning_rate <= 0:
            raise ValueError("sample_count, steps, and learning_rate must be positive")

    def echo(self) -> dict:
        doc = asdict(self)
        doc["spec"] = vars(self.spec)
        doc["objective"] = vars(self.objective)
        return doc


@dataclass
class ScanReport:
    """Outcome of one inversion, including optimization traces."""

    scanner_class: str
    mode: str
    verdict: BackdoorVerdict
    exact_l0: Optional[float]
    steps_run: int
    seed: int
    wall_seconds: float
    trigger_path: Optional[str] = None
    loss_trace: list = field(default_factory=list)
    distance_trace: list = field(default_factory=list)   # (smooth, exact) per step
    config_echo: dict = field(default_factory=dict)
    failure: Optional[str] = None
    best_step: int = 0
    trigger: Optional[object] = None
    model_id: Optional[str] = None
    # best ASR among candidates whose distance respects the bound (0.0 when
    # the scan never entered the budget): the vulnerability level within it
    budget_asr: float = 0.0

    def to_json_doc(self) -> dict:
        v = self.verdict
        return {
            "scanner_class": self.scanner_class,
            "mode": self.mode,
            "target": v.target,
            "victim": v.victim,
            "asr": v.asr,
            "regulation_distance": v.regulation_distance,
            "exact_l0": self.exact_l0,
            "bound": v.bound,
            "valid": v.valid,
            "steps_run": self.steps_run,
            "seed": self.seed,
            "wall_seconds": self.wall_seconds,
            "trigger_path": self.trigger_path,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_doc(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Presets


def preset(scanner_class: str, profile: DatasetProfile, target: int = 0,
           mode: str = "universal", victim: Optional[int] = None, seed: int = 0,
           asr_floor: float = ASR_FLOOR, **overrides) -> ScanConfig:
    """Fully populated ScanConfig for a scanner class on a dataset profile."""
    if scanner_class not in SCANNER_CLASSES:
        raise KeyError(f"unknown scanner class {scanner_class!r}")
    objective = ObjectiveConfig(asr_floor=asr_floor)
    count = profile.sample_count
    steps, lr = 1000, 0.1
    encoder_id = profile.encoder_id
    if scanner_class in _GENERATOR_CLASSES:
        count = profile.generator_sample_count
        steps, lr = 3000, 1e-3
    elif scanner_class in _CONV_CLASSES:
        steps, lr = 3000, 1e-3

    if scanner_class.startswith("GenL0"):
        key = "composite-l0" if scanner_class == "GenL0-composite" else "pixel-l0"
        spec = RegulationSpec("pixel", "L0", profile.bound(key))
    elif scanner_class == "GenL2":
        spec = RegulationSpec("pixel", "L2", profile.bound("pixel-l2"))
    elif scanner_class == "GenLinf":
        spec = RegulationSpec("pixel", "Linf", profile.bound("pixel-linf"))
    elif scanner_class == "FeatureL2":
        if encoder_id is None:
            raise KeyError("FeatureL2 preset needs a profile with an encoder id")
        spec = RegulationSpec("feature", "L2", profile.bound("feature-l2"),
                              projection=encoder_id)
    else:                                # FreeB
        spec = RegulationSpec("frequency", "L1", profile.bound("frequency-l1"),
                              projection="dft")
    config = ScanConfig(scanner_class=scanner_class, target=target, spec=spec,
                        mode=mode, victim=victim, sample_count=count, steps=steps,
                        learning_rate=lr, seed=seed, objective=objective,
                        encoder_id=encoder_id, image_shape=profile.image_shape)
    if overrides:
        config = replace(config, **overrides)
    return config


# ---------------------------------------------------------------------------
# Trigger construction per scanner class


def build_trigger(config: ScanConfig, samples: ImageSet, torch_gen: torch.Generator):
    h, w, c = samples.image_shape
    cls = config.scanner_class
    if cls == "GenL0-patch":
        mask = SigmoidGrid((h, w), init=-3.0, generator=torch_gen)
        pattern = SigmoidGrid((c, h, w), init=0.0, generator=torch_gen)
        return LocalizedTrigger(mask, pattern, straight_through=True)
    if cls == "GenLinf":
        mask = SigmoidGrid((h, w), init=-3.0, generator=torch_gen)
        pattern = SigmoidGrid((c, h, w), init=0.0, generator=torch_gen)
        return LocalizedTrigger(mask, pattern)
    if cls in _GENERATOR_CLASSES:
        mask_gen = ConvGenerator(c, 1, generator=torch_gen)
        pattern_gen = ConvGenerator(c, c, generator=torch_gen)
        return LocalizedTrigger(mask_gen, pattern_gen, straight_through=True)
    if cls == "GenL0-composite":
        donor = config.donor_class if config.donor_class is not None else config.target
        donor_idx = samples.class_indices(donor)
        if len(donor_idx) == 0:
            raise ValueError(f"no donor samples of class {donor} available")
        bank = torch.from_numpy(samples.images[donor_idx[:64]]).permute(0, 3, 1, 2)
        half = np.zeros((h, w), dtype=np.float32)
        half[:, : w // 2] = 1.0
        return LocalizedTrigger(ConstantGrid(half), ImageMixture(bank))
    if cls in _CONV_CLASSES:
        if config.encoder_id is None:
            raise ValueError(f"{cls} needs an encoder id in the scan config")
        pair = get_encoder_pair(config.encoder_id)
        return PervasiveTrigger(config.encoder_id, pair.channels, generator=torch_gen)
    if cls == "FreeB":
        return FrequencyTrigger.parameterized((c, h, w), generator=torch_gen)
    raise ValueError(f"unknown scanner class {cls!r}")


def _composite_variants(config: ScanConfig, samples, torch_gen):
    """Composite tries both half-planes; others have a single template."""
    if config.scanner_class != "GenL0-composite":
        return [build_trigger(config, samples, torch_gen)]
    triggers = []
    h, w, _ = samples.image_shape
    for side in range(2):
        trig = build_trigger(config, samples, torch_gen)
        half = np.zeros((h, w), dtype=np.float32)
        if side == 0:
            half[:, : w // 2] = 1.0
        else:
            half[:, w // 2:] = 1.0
        trig.mask_source = ConstantGrid(half)
        triggers.append(trig)
    return triggers


def _pretrain_diverse_masks(mask_gen: ConvGenerator, x: torch.Tensor, steps: int,
                            torch_gen: torch.Generator) -> None:
    """Push the mask generator toward small, input-dependent masks before the
    joint inversion (inputaware mode)."""
    opt = torch.optim.Adam(mask_gen.parameters(), lr=1e-3)
    n = len(x)
    for _ in range(steps):
        idx = torch.randperm(n, generator=torch_gen)[: min(16, n)]
        masks = mask_gen(x[idx]).reshape(len(idx), -1)
        perm = torch.roll(torch.arange(len(idx)), 1)
        diversity = (masks - masks[perm]).abs().mean()
        size_pressure = masks.mean()
        loss = size_pressure - diversity
        opt.zero_grad()
        loss.backward()
        opt.step()


# ---------------------------------------------------------------------------
# Inversion


def _eligible(samples: ImageSet, config: ScanConfig) -> np.ndarray:
    if config.mode == "label-specific":
        idx = samples.class_indices(config.victim)
    else:
        idx = np.nonzero(samples.labels != config.target)[0]
    if len(idx) == 0:
        raise ValueError("no eligible samples for this scan mode")
    return idx


def _hard_eval(scanner_class: str) -> bool:
    return scanner_class in _HARD_EVAL_CLASSES


@dataclass
class _Candidate:
    step: int
    asr: float
    exact: float
    valid: bool
    state: dict

    def key(self):
        return (not self.valid, -self.asr, self.exact, self.step)


def _evaluate_candidate(models, trigger, x_eval, config, encoder, step) -> _Candidate:
    hard = _hard_eval(config.scanner_class)
    with torch.no_grad():
        stamped = trigger.apply_batch(x_eval, hard=hard, clamp=True)
        hits = []
        for model in models:
            preds = model.logits(stamped).argmax(dim=1)
            hits.append(float((preds == config.target).float().mean()))
        asr = float(np.mean(hits))
        dist = regulation_distance(trigger, x_eval, config.spec, encoder=encoder)
    valid = (dist.exact <= config.spec.bound
             and asr >= config.objective.asr_floor)
    state = copy.deepcopy(trigger.state_dict())
    return _Candidate(step=step, asr=asr, exact=dist.exact, valid=valid, state=state)


def _project_mask_to_budget(trigger: LocalizedTrigger, spec: RegulationSpec) -> bool:
    """Force a constant sigmoid mask inside its budget: top-floor(bound)
    entries fully on for L0, a hard cap on the mask value for Linf.
    Idempotent, so it can run after every optimizer step."""
    if not isinstance(trigger.mask_source, SigmoidGrid):
        return False
    raw = trigger.mask_source.raw
    if spec.metric == "L0":
        k = int(spec.bound)
        if k < 1:
            return False
        with torch.no_grad():
            flat = raw.reshape(-1)
            keep = torch.topk(flat, min(k, flat.numel())).indices
            newraw = torch.full_like(flat, -8.0)
            newraw[keep] = torch.clamp(flat[keep], min=2.0)
            raw.copy_(newraw.reshape(raw.shape))
        return True
    if spec.metric == "Linf":
        # a hair below the exact logit so the float32 sigmoid stays <= bound
        cap = float(np.log(spec.bound / (1.0 - spec.bound))) - 1e-4
        with torch.no_grad():
            raw.clamp_(max=cap)
        return True
    return False


def _polish_within_budget(models, trigger, x_opt, x_eval, config, encoder,
                          candidates, torch_gen, start_step):
    """Projected-gradient refinement inside the budget.

    The bound-penalty trajectory tends to hover above the budget; this phase
    projects the mask onto it and keeps optimizing exploitation alone,
    re-projecting after every step, so every harvested candidate is
    budget-feasible.
    """
    if not _project_mask_to_budget(trigger, config.spec):
        return
    params = trigger.trainable_parameters()
    if not params:
        return
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    batch = min(config.batch_size, len(x_opt))
    perm = torch.randperm(len(x_opt), generator=torch_gen)
    cursor = 0
    polish_steps = max(config.eval_every * 4, 200)
    for step in range(1, polish_steps + 1):
        if cursor + batch > len(x_opt):
            perm = torch.randperm(len(x_opt), generator=torch_gen)
            cursor = 0
        xb = x_opt[perm[cursor:cursor + batch]]
        cursor += batch
        stamped = trigger.apply_batch(xb, hard=False, clamp=True)
        targets = torch.full((len(xb),), config.target, dtype=torch.long)
        exploit = None
        for m in models:
            ce = torch.nn.functional.cross_entropy(m.logits(stamped), targets)
            exploit = ce if exploit is None else exploit + ce
        opt.zero_grad()
        (exploit / len(models)).backward()
        opt.step()
        _project_mask_to_budget(trigger, config.spec)
        if step % max(config.eval_every // 2, 25) == 0 or step == polish_steps:
            candidates.append(_evaluate_candidate(models, trigger, x_eval, config,
                                                  encoder, start_step + step))


def invert_trigger(model: Union[ClassifierHandle, Sequence[ClassifierHandle]],
                   samples: ImageSet, config: ScanConfig) -> ScanReport:
    """Optimize a trigger against one model (or jointly against several).

    The reported ASR and distance come from candidates evaluated on a
    held-out fifth of the samples, never the optimization batches. A
    non-finite loss aborts the scan and is reported as a failure rather
    than raised.
    """
    models = [model] if isinstance(model, ClassifierHandle) else list(model)
    t_start = time.perf_counter()
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    torch_gen = torch.Generator().manual_seed(config.seed)

    idx = _eligible(samples, config)
    if len(idx) > config.sample_count:
        idx = np.sort(rng.choice(idx, size=config.sample_count, replace=False))
    pool = samples.subset(idx)
    n_eval = max(1, int(round(config.eval_fraction * len(pool))))
    order = rng.permutation(len(pool))
    eval_set = pool.subset(order[:n_eval])
    opt_set = pool.subset(order[n_eval:])

    x_opt, _ = opt_set.tensors()
    x_eval, _ = eval_set.tensors()

    encoder = None
    if config.spec.space == "feature":
        encoder = get_encoder_pair(config.spec.projection).encoder

    candidates: list[_Candidate] = []
    loss_trace: list[float] = []
    distance_trace: list[tuple] = []
    failure = None
    steps_run = 0

    for trigger in _composite_variants(config, samples, torch_gen):
        if (config.scanner_class == "GenL0-inputaware"
                and isinstance(trigger.mask_source, ConvGenerator)):
            _pretrain_diverse_masks(trigger.mask_source, x_opt,
                                    config.pretrain_steps, torch_gen)
        opt = torch.optim.Adam(trigger.trainable_parameters(), lr=config.learning_rate)
        controller = LambdaController(config.objective.regulation_weight,
                                      config.objective.asr_floor)
        batch = min(config.batch_size, len(x_opt))
        perm = torch.randperm(len(x_opt), generator=torch_gen)
        cursor = 0
        aborted = False
        for step in range(1, config.steps + 1):
            if cursor + batch > len(x_opt):
                perm = torch.randperm(len(x_opt), generator=torch_gen)
                cursor = 0
            xb = x_opt[perm[cursor:cursor + batch]]
            cursor += batch

            out_pre = trigger.apply_batch(xb, hard=False, clamp=False)
            stamped = out_pre.clamp(0.0, 1.0)
            dist = regulation_distance(trigger, xb, config.spec, encoder=encoder,
                                       transformed=out_pre)
            targets = torch.full((len(xb),), config.target, dtype=torch.long)
            exploit = None
            first_logits = None
            for m in models:
                logits = m.logits(stamped)
                ce = torch.nn.functional.cross_entropy(logits, targets)
                exploit = ce if exploit is None else exploit + ce
                if first_logits is None:
                    first_logits = logits
            exploit = exploit / len(models)
            penalty = bound_loss(dist.smooth, config.spec)
            total = exploit + controller.value * penalty
            if config.spec.metric == "L0" and isinstance(trigger, LocalizedTrigger):
                # the steep-sigmoid surrogate has no gradient on saturated mask
                # entries; a weak L1 pull keeps them shrinkable
                mask_l1 = trigger.masks(xb).reshape(len(xb), -1).sum(dim=1).mean()
                total = total + controller.value * config.spec.loss_scale \
                    * mask_l1 / config.spec.bound
            if not torch.isfinite(total):
                failure = f"non-finite loss at step {step}"
                aborted = True
                break
            opt.zero_grad()
            total.backward()
            opt.step()
            steps_run += 1
            loss_trace.append(float(total.detach()))
            distance_trace.append((float(dist.smooth.detach()), dist.exact))
            batch_asr = float((first_logits.detach().argmax(dim=1)
                               == config.target).float().mean())
            controller.update(batch_asr)
            if step % config.eval_every == 0 or step == config.steps:
                candidates.append(_evaluate_candidate(models, trigger, x_eval,
                                                      config, encoder, step))
        if (not aborted and candidates and config.spec.metric in ("L0", "Linf")
                and isinstance(trigger, LocalizedTrigger)):
            # warm start from the tightest mask that still clears the floor
            floor = config.objective.asr_floor
            strong = [c for c in candidates if c.asr >= floor]
            warm = min(strong, key=lambda c: (c.exact, -c.asr)) if strong \
                else min(candidates, key=lambda c: (-c.asr, c.exact))
            trigger.load_state_dict(warm.state)
            _polish_within_budget(models, trigger, x_opt, x_eval, config, encoder,
                                  candidates, torch_gen, config.steps)
        if aborted:
            break

    best_trigger = None
    if candidates:
        best = min(candidates, key=_Candidate.key)
        best_trigger = build_trigger(config, samples,
                                     torch.Generator().manual_seed(config.seed))
        best_trigger.load_state_dict(best.state)
        asr, exact, valid, best_step = best.asr, best.exact, best.valid, best.step
    else:
        asr, exact, valid, best_step = 0.0, float("inf"), False, 0
        failure = failure or "no candidates evaluated"

    if best_trigger is not None:
        best_trigger.eval_hard = _hard_eval(config.scanner_class)
        best_trigger.regulation = config.spec

    verdict = BackdoorVerdict(asr=asr,
                              regulation_distance=exact if np.isfinite(exact) else 0.0,
                              bound=config.spec.bound,
                              valid=valid, target=config.target, victim=config.victim)
    exact_l0 = exact if (config.spec.metric == "L0" and np.isfinite(exact)) else None
    model_id = "+".join(f"{m.meta.architecture}:{m.meta.provenance}" for m in models)
    in_budget = [c.asr for c in candidates if c.exact <= config.spec.bound]
    return ScanReport(scanner_class=config.scanner_class, mode=config.mode,
                      verdict=verdict, exact_l0=exact_l0, steps_run=steps_run,
                      seed=config.seed,
                      wall_seconds=time.perf_counter() - t_start,
                      loss_trace=loss_trace, distance_trace=distance_trace,
                      config_echo=config.echo(), failure=failure,
                      best_step=best_step, trigger=best_trigger, model_id=model_id,
                      budget_asr=max(in_budget) if in_budget else 0.0)


# ---------------------------------------------------------------------------
# Campaigns


def draw_label_plan(num_classes: int, mode: str, seed: int,
                    universal_targets: int = 5, pair_count: int = 3) -> list:
    """Random targets (universal) or victim/target pairs (label-specific)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    if mode == "universal":
        targets = rng.choice(num_classes, size=min(universal_targets, num_classes),
                             replace=False)
        return [(int(t), None) for t in targets]
    pairs = []
    while len(pairs) < pair_count:
        v, t = rng.choice(num_classes, size=2, replace=False)
        if (int(t), int(v)) not in pairs:
            pairs.append((int(t), int(v)))
    return pairs


def run_campaign(model, samples: ImageSet, profile: DatasetProfile,
                 scanner_classes: Sequence[str], mode: str = "universal",
                 label_plan: Optional[list] = None, seed: int = 0,
                 out_dir=None, workers: int = 1, **preset_overrides) -> list:
    """One scan per (scanner class, target[, victim]); deterministic by seed.

    Scans are independent and may run on up to *workers* threads; reports
    come back in the fixed (scanner class, label) order either way.
    """
    from concurrent.futures import ThreadPoolExecutor
    from pathlib import Path

    if label_plan is None:
        num_classes = model.num_classes if isinstance(model, ClassifierHandle) \
            else model[0].num_classes
        label_plan = draw_label_plan(num_classes, mode, seed)
    configs = []
    for ci, scanner_class in enumerate(scanner_classes):
        for li, (target, victim) in enumerate(label_plan):
            configs.append(preset(scanner_class, profile, target=target, mode=mode,
                                  victim=victim, seed=seed + 1000 * ci + li,
                                  **preset_overrides))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda c: invert_trigger(model, samples, c),
                                    configs))
    else:
        reports = [invert_trigger(model, samples, c) for c in configs]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for report in reports:
            if report.trigger is None:
                continue
            v = report.verdict
            name = f"trigger_{report.scanner_class}_{report.mode}_t{v.target}"
            if v.victim is not None:
                name += f"_v{v.victim}"
            path = out_dir / f"{name}.pt"
            save_trigger(report.trigger, path)
            report.trigger_path = str(path)
    return reports


def campaign_summary(reports: Sequence[ScanReport]) -> dict:
    """Valid-backdoor counts per scanner class."""
    summary: dict = {}
    for r in reports:
        entry = summary.setdefault(r.scanner_class, {"scans": 0, "valid": 0})
        entry["scans"] += 1
        entry["valid"] += int(r.verdict.valid)
    return summary


# ---------------------------------------------------------------------------
# Estimator wrapper


class TriggerInverter(BaseEstimator):
    """Scikit-learn flavored wrapper around :func:`invert_trigger`.

    ``fit(X, y)`` runs the inversion against the model given at construction
    and exposes ``report_`` and ``trigger_``. Parameters mirror ScanConfig so
    ``get_params`` / ``set_params`` compose with the usual tooling.
    """

    def __init__(self, model=None, scanner_class="GenL0-patch", target=0,
                 mode="universal", victim=None, spec=None, sample_count=100,
                 steps=1000, learning_rate=0.1, seed=0, objective=None,
                 batch_size=50, eval_every=50, encoder_id=None, donor_class=None):
        self.model = model
        self.scanner_class = scanner_class
        self.target = target
        self.mode = mode
        self.victim = victim
        self.spec = spec
        self.sample_count = sample_count
        self.steps = steps
        self.learning_rate = learning_rate
        self.seed = seed
        self.objective = objective
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.encoder_id = encoder_id
        self.donor_class = donor_class

    def _config(self) -> ScanConfig:
        if self.spec is None:
            raise ValueError("TriggerInverter needs a RegulationSpec")
        return ScanConfig(scanner_class=self.scanner_class, target=self.target,
                          spec=self.spec, mode=self.mode, victim=self.victim,
                          sample_count=self.sample_count, steps=self.steps,
                          learning_rate=self.learning_rate, seed=self.seed,
                          objective=self.objective or ObjectiveConfig(),
                          batch_size=self.batch_size, eval_every=self.eval_every,
                          encoder_id=self.encoder_id, donor_class=self.donor_class)

    def fit(self, X, y):
        if self.model is None:
            raise ValueError("TriggerInverter needs a model")
        samples = X if isinstance(X, ImageSet) else ImageSet(X, y)
        self.report_ = invert_trigger(self.model, samples, self._config())
        self.trigger_ = self.report_.trigger
        return self

    def transform(self, X):
        """Stamp a batch with the inverted trigger."""
        if not hasattr(self, "trigger_") or self.trigger_ is None:
            raise RuntimeError("TriggerInverter is not fitted")
        return self.trigger_.transform(X)
