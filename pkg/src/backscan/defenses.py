"""Defense baselines: STRIP, activation clustering, fine-pruning, hardening.

STRIP and activation clustering detect attack instances; fine-pruning and
scanner-driven hardening try to remove the vulnerability from the model.
Hardening re-trains on triggers inverted on the fly, stamped onto samples
that keep their correct labels.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from .core import ClassifierHandle, ImageSet
from .scanner import DatasetProfile, invert_trigger, preset
from .zoo import DatasetSplits, TrainConfig, TrainingFailure, _make_optimizer

logger = logging.getLogger(__name__)

__all__ = [
    "DefenseReport",
    "strip_entropy",
    "strip_entropies",
    "strip_far",
    "StripDetector",
    "activation_clustering",
    "fine_prune",
    "harden",
]

DEFAULT_OVERLAYS = 64
STRIP_BLEND_WEIGHT = 0.5
MIN_FAR_SAMPLES = 100


@dataclass
class DefenseReport:
    """One defense evaluation, serializable to a fixed JSON schema."""

    defense: str
    model_provenance: str
    trigger_source: str
    seed: int
    far: Optional[float] = None
    frr: Optional[float] = None
    silhouette_by_label: Optional[dict] = None
    asr_before: Optional[float] = None
    asr_after: Optional[float] = None
    acc_before: Optional[float] = None
    acc_after: Optional[float] = None
    config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("far", "frr", "asr_before", "asr_after", "acc_before", "acc_after"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_json_doc(self) -> dict:
        return {
            "defense": self.defense,
            "model_provenance": self.model_provenance,
            "trigger_source": self.trigger_source,
            "far": self.far,
            "frr": self.frr,
            "silhouette_by_label": self.silhouette_by_label,
            "asr_before": self.asr_before,
            "asr_after": self.asr_after,
            "acc_before": self.acc_before,
            "acc_after": self.acc_after,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_doc(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# STRIP


def _entropy_of_batch(model: ClassifierHandle, blended: torch.Tensor) -> float:
    with torch.no_grad():
        logits = model.logits(blended)
        probs = torch.softmax(logits, dim=1).clamp_min(1e-12)
        ent = -(probs * probs.log()).sum(dim=1)
    return float(ent.mean())


def strip_entropy(model: ClassifierHandle, image, clean_pool: ImageSet,
                  n_overlays: int = DEFAULT_OVERLAYS, seed: int = 0,
                  weight: float = STRIP_BLEND_WEIGHT) -> float:
    """Mean prediction entropy of the input blended with clean overlays.

    Low entropy means the prediction survives superposition, the signature
    of a strong trigger.
    """
    if n_overlays < 1:
        raise ValueError("n_overlays must be at least 1")
    if len(clean_pool) == 0:
        raise ValueError("clean overlay pool is empty")
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise ValueError("strip_entropy takes a single (H, W, C) image")
    rng = np.random.default_rng(np.random.PCG64(seed))
    picks = rng.integers(0, len(clean_pool), size=n_overlays)
    overlays = torch.from_numpy(clean_pool.images[picks]).permute(0, 3, 1, 2)
    x = torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0)
    blended = (1 - weight) * x + weight * overlays
    return _entropy_of_batch(model, blended)


def strip_entropies(model: ClassifierHandle, images: np.ndarray, clean_pool: ImageSet,
                    n_overlays: int = DEFAULT_OVERLAYS, seed: int = 0,
                    weight: float = STRIP_BLEND_WEIGHT) -> np.ndarray:
    """Vectorized strip_entropy over a batch; one child seed per image."""
    seeds = np.random.default_rng(np.random.PCG64(seed)).integers(0, 2 ** 31, len(images))
    return np.array([strip_entropy(model, img, clean_pool, n_overlays=n_overlays,
                                   seed=int(s), weight=weight)
                     for img, s in zip(images, seeds)])


def strip_far(model: ClassifierHandle, clean_set: ImageSet, attack_images: np.ndarray,
              frr: float = 0.01, clean_pool: Optional[ImageSet] = None,
              n_overlays: int = DEFAULT_OVERLAYS, seed: int = 0) -> float:
    """False acceptance rate at a fixed clean false rejection rate.

    The rejection threshold is the frr-quantile of clean entropies; an attack
    sample is accepted (a defense miss) when its entropy is above it.
    """
    if len(clean_set) < MIN_FAR_SAMPLES or len(attack_images) < MIN_FAR_SAMPLES:
        raise ValueError(f"need at least {MIN_FAR_SAMPLES} clean and attack samples "
                         "to estimate the FAR")
    pool = clean_pool if clean_pool is not None else clean_set
    clean_ents = strip_entropies(model, clean_set.images, pool,
                                 n_overlays=n_overlays, seed=seed)
    attack_ents = strip_entropies(model, np.asarray(attack_images), pool,
                                  n_overlays=n_overlays, seed=seed + 1)
    threshold = float(np.quantile(clean_ents, frr))
    return float(np.mean(attack_ents > threshold))


class StripDetector(BaseEstimator):
    """Estimator wrapper: fit on clean samples, score or accept/reject inputs.

    ``fit`` splits the clean set into an overlay pool and a calibration half
    whose entropy quantile becomes the rejection threshold. ``predict``
    returns +1 for accepted (clean-looking) and -1 for rejected inputs.
    """

    def __init__(self, model=None, frr=0.01, n_overlays=DEFAULT_OVERLAYS,
                 weight=STRIP_BLEND_WEIGHT, seed=0):
        self.model = model
        self.frr = frr
        self.n_overlays = n_overlays
        self.weight = weight
        self.seed = seed

    def fit(self, X, y=None):
        clean = X if isinstance(X, ImageSet) else ImageSet(X, np.zeros(len(X), dtype=int))
        rng = np.random.default_rng(np.random.PCG64(self.seed))
        order = rng.permutation(len(clean))
        half = len(clean) // 2
        self.pool_ = clean.subset(order[:half])
        calibration = clean.subset(order[half:])
        self.calibration_entropies_ = strip_entropies(
            self.model, calibration.images, self.pool_, n_overlays=self.n_overlays,
            seed=self.seed + 1, weight=self.weight)
        self.threshold_ = float(np.quantile(self.calibration_entropies_, self.frr))
        return self

    def score_samples(self, X) -> np.ndarray:
        images = X.images if isinstance(X, ImageSet) else np.asarray(X)
        return strip_entropies(self.model, images, self.pool_,
                               n_overlays=self.n_overlays, seed=self.seed + 2,
                               weight=self.weight)

    def predict(self, X) -> np.ndarray:
        ents = self.score_samples(X)
        return np.where(ents > self.threshold_, 1, -1)


# ---------------------------------------------------------------------------
# Activation clustering


def _penultimate_activations(model: ClassifierHandle, images: np.ndarray) -> np.ndarray:
    """Input features of the final linear layer, captured with a hook."""
    linear = [m for m in model.module.modules() if isinstance(m, torch.nn.Linear)]
    if not linear:
        raise ValueError("model has no linear head to hook")
    captured = []
    handle = linear[-1].register_forward_hook(
        lambda mod, inp, out: captured.append(inp[0].detach()))
    try:
        model.predict_logits(images)
    finally:
        handle.remove()
    return torch.cat(captured).cpu().numpy()


def activation_clustering(model: ClassifierHandle, data: ImageSet, seed: int = 0,
                          min_samples: int = 4) -> dict:
    """Per-label silhouette score of a 2-means split of last-layer activations.

    Labels with fewer than *min_samples* samples are skipped with a logged
    notice. Well separated clusters (score near 1) flag a label set as
    containing a distinct sub-population.
    """
    scores: dict = {}
    for label in sorted(np.unique(data.labels).tolist()):
        idx = data.class_indices(label)
        if len(idx) < min_samples:
            logger.warning("activation clustering: label %d skipped "
                           "(%d < %d samples)", label, len(idx), min_samples)
            continue
        acts = _penultimate_activations(model, data.images[idx])
        km = KMeans(n_clusters=2, n_init=10, random_state=seed)
        assignments = km.fit_predict(acts)
        if len(np.unique(assignments)) < 2:
            scores[int(label)] = 0.0
            continue
        scores[int(label)] = float(silhouette_score(acts, assignments))
    return scores


# ---------------------------------------------------------------------------
# Fine-pruning

# Parameter prefixes producing the final feature map, per zoo architecture.
# Zeroing the batch-norm affine rows (plus the conv rows) makes a pruned
# channel exactly zero after the activation.
_PRUNABLE = {
    "plainconv": ("8", "9"),
    "residual": ("4.conv2", "4.bn2", "4.skip_conv", "4.skip_bn"),
    "dwsep": ("4.3", "4.4"),
}


def _feature_channel_activations(model: ClassifierHandle, images: np.ndarray) -> np.ndarray:
    acts = _penultimate_activations(model, images)
    return acts.mean(axis=0)


def _zero_channels(module: torch.nn.Module, prefixes, channels) -> None:
    state = module.state_dict()
    for prefix in prefixes:
        for suffix in ("weight", "bias"):
            key = f"{prefix}.{suffix}"
            if key in state:
                state[key][channels] = 0.0
    module.load_state_dict(state)


def fine_prune(model: ClassifierHandle, clean_set: ImageSet, prune_fraction: float,
               finetune_config: Optional[TrainConfig] = None,
               eval_set: Optional[ImageSet] = None, max_accuracy_drop: float = 2.0,
               seed: int = 0) -> ClassifierHandle:
    """Zero the least-active final-feature channels, then fine-tune on clean data.

    Channels are ranked by mean activation on *clean_set*, lowest first; the
    pruned channels stay zero through fine-tuning. Fails if accuracy on
    *eval_set* drops more than *max_accuracy_drop* points.
    """
    if not 0.0 <= prune_fraction < 1.0:
        raise ValueError("prune_fraction must lie in [0, 1)")
    arch = model.meta.architecture
    if arch not in _PRUNABLE:
        raise KeyError(f"architecture {arch!r} is not in the pruning table")
    eval_set = eval_set if eval_set is not None else clean_set
    before = float(np.mean(model.predict(eval_set.images) == eval_set.labels))

    module = copy.deepcopy(model.module)
    meta = copy.deepcopy(model.meta)
    meta.provenance = f"pruned:{model.meta.provenance}"
    pruned = ClassifierHandle(module, model.num_classes, meta)
    channel_means = _feature_channel_activations(model, clean_set.images)
    n_prune = int(len(channel_means) * prune_fraction)
    if n_prune == 0:
        meta.accuracy = before
        return pruned

    channels = np.argsort(channel_means)[:n_prune].copy()
    _zero_channels(module, _PRUNABLE[arch], channels)

    if finetune_config is None:
        finetune_config = TrainConfig(epochs=2, learning_rate=5e-4)
    for p in module.parameters():
        p.requires_grad_(True)
    torch.manual_seed(seed)
    x, y = clean_set.tensors()
    opt = _make_optimizer(module.parameters(), finetune_config)
    ce = torch.nn.CrossEntropyLoss()
    order_rng = np.random.default_rng(np.random.PCG64(seed + 1))
    module.train()
    for _ in range(finetune_config.epochs):
        order = order_rng.permutation(len(x))
        for i in range(0, len(order), finetune_config.batch_size):
            idx = torch.from_numpy(order[i:i + finetune_config.batch_size])
            opt.zero_grad()
            ce(module(x[idx]), y[idx]).backward()
            opt.step()
            # keep pruned channels at zero while the rest of the net adapts
            with torch.no_grad():
                _zero_channels(module, _PRUNABLE[arch], channels)
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)

    after = float(np.mean(pruned.predict(eval_set.images) == eval_set.labels))
    meta.accuracy = after
    if (before - after) * 100.0 > max_accuracy_drop:
        raise TrainingFailure(
            f"fine-pruning dropped accuracy {before:.4f} -> {after:.4f}, "
            f"more than {max_accuracy_drop} points",
            diagnostics={"before": before, "after": after,
                         "prune_fraction": prune_fraction})
    return pruned


# ---------------------------------------------------------------------------
# Hardening


def harden(model: ClassifierHandle, dataset: DatasetSplits, profile: DatasetProfile,
           scanner_class: str = "GenL0-patch", rounds: int = 2,
           train_config: Optional[TrainConfig] = None, seed: int = 0,
           targets: Optional[Sequence[int]] = None,
           max_accuracy_drop: float = 3.0, scan_overrides: Optional[dict] = None
           ) -> ClassifierHandle:
    """Adversarially re-train against triggers inverted on the fly.

    Each round inverts fresh triggers on the current model (one per target)
    and re-trains on stamped-but-correctly-labeled samples mixed 1:1 with
    clean batches. Fails with the offending round if clean accuracy drops
    more than *max_accuracy_drop* points.
    """
    if scanner_class not in ("GenL0-patch", "FeatureL2"):
        raise ValueError("hardening supports the GenL0-patch and FeatureL2 presets")
    if targets is None:
        rng = np.random.default_rng(np.random.PCG64(seed))
        targets = sorted(int(t) for t in
                         rng.choice(model.num_classes, size=2, replace=False))
    train_config = train_config or TrainConfig(epochs=2, learning_rate=5e-4)
    scan_overrides = scan_overrides or {}

    module = copy.deepcopy(model.module)
    meta = copy.deepcopy(model.meta)
    meta.provenance = f"hardened:{scanner_class}"
    meta.train_config = dict(meta.train_config,
                             hardening={"scanner": scanner_class, "rounds": rounds,
                                        "targets": list(targets)})
    current = ClassifierHandle(module, model.num_classes, meta)
    baseline = float(np.mean(model.predict(dataset.test.images) == dataset.test.labels))

    x_train, y_train = dataset.train.tensors()
    for round_idx in range(rounds):
        triggers = []
        for ti, target in enumerate(targets):
            config = preset(scanner_class, profile, target=target,
                            seed=seed + 97 * round_idx + ti, **scan_overrides)
            report = invert_trigger(current, dataset.train, config)
            if report.trigger is not None:
                triggers.append(report.trigger)
        if not triggers:
            raise TrainingFailure(f"round {round_idx}: no triggers inverted",
                                  diagnostics={"round": round_idx})

        for p in module.parameters():
            p.requires_grad_(True)
        torch.manual_seed(seed + round_idx)
        opt = _make_optimizer(module.parameters(), train_config)
        ce = torch.nn.CrossEntropyLoss()
        order_rng = np.random.default_rng(np.random.PCG64(seed + 31 * round_idx))
        module.train()
        bs = train_config.batch_size
        for _ in range(train_config.epochs):
            order = order_rng.permutation(len(x_train))
            for bi, i in enumerate(range(0, len(order), bs)):
                idx = torch.from_numpy(order[i:i + bs])
                xb, yb = x_train[idx], y_train[idx]
                trig = triggers[bi % len(triggers)]
                with torch.no_grad():
                    stamped = trig.apply_batch(xb)
                opt.zero_grad()
                mixed_x = torch.cat([xb, stamped])
                mixed_y = torch.cat([yb, yb])          # correct labels on both halves
                ce(module(mixed_x), mixed_y).backward()
                opt.step()
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)

        acc = float(np.mean(current.predict(dataset.test.images) == dataset.test.labels))
        if (baseline - acc) * 100.0 > max_accuracy_drop:
            raise TrainingFailure(
                f"hardening round {round_idx} dropped accuracy "
                f"{baseline:.4f} -> {acc:.4f}",
                diagnostics={"round": round_idx, "before": baseline, "after": acc})
        meta.accuracy = acc
    return current
