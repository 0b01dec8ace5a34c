"""Desk-scale injected backdoor suite.

Nine stamp kinds cover the classic attack families: patch, dynamic,
inputaware-lite, composite (pixel-count bounded); warp (small pixel L2);
blend, reflection, sig (bounded maximum change); filter (feature-level
restyling, realized as a color-projection matrix). They validate the
scanners and calibrate the regulation budgets the scanners are judged
against.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .core import ACCURACY_FLOOR, ClassifierHandle, ImageSet, RegulationSpec
from .zoo import DatasetSplits, TrainConfig, TrainingFailure, train_classifier

__all__ = [
    "KINDS",
    "PoisonRecipe",
    "make_recipe",
    "stamp",
    "stamp_batch",
    "RecipeTrigger",
    "make_poisoned_dataset",
    "train_backdoored_model",
    "recipe_asr",
    "measure_recipe_distance",
    "recipe_to_config",
    "recipe_from_config",
    "export_examples",
]

KINDS = ("patch", "dynamic", "inputaware-lite", "composite", "warp",
         "blend", "reflection", "sig", "filter")

MAX_POISON_RATE = 0.10
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class PoisonRecipe:
    """One injected attack: kind, target label, poison rate, and assets."""

    kind: str
    target: int
    poison_rate: float
    assets: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.poison_rate <= MAX_POISON_RATE:
            raise ValueError(f"poison rate must lie in [0, {MAX_POISON_RATE}]")
        _check_assets(self.kind, self.assets)


def _check_assets(kind, assets):
    if kind in ("blend", "reflection"):
        if not 0.0 < assets["alpha"] <= 0.2:
            raise ValueError("blend-family alpha must lie in (0, 0.2]")
    if kind == "sig":
        if not 0.0 < assets["amplitude"] <= 0.2:
            raise ValueError("sig amplitude must lie in (0, 0.2]")
    if kind in ("patch", "dynamic", "inputaware-lite"):
        if assets["pixel_budget"] <= 0:
            raise ValueError("pixel budget must be positive")


def _block_mask(h, w, budget, top, left):
    """Boolean mask covering the first *budget* raster cells of the smallest
    square block anchored at (top, left)."""
    side = math.ceil(math.sqrt(budget))
    mask = np.zeros((h, w), dtype=bool)
    rows, cols = np.divmod(np.arange(budget), side)
    mask[top + rows, left + cols] = True
    return mask, side


def _anchor_grid(h, w, side, count=4):
    rows = np.linspace(0, h - side, count).round().astype(int)
    cols = np.linspace(0, w - side, count).round().astype(int)
    return [(int(r), int(c)) for r in rows for c in cols]


def _smooth_field(h, w, channels, rng, blur=3.0):
    from scipy.ndimage import gaussian_filter
    noise = rng.uniform(0, 1, size=(h, w, channels))
    sm = gaussian_filter(noise, sigma=(blur, blur, 0))
    lo, hi = sm.min(), sm.max()
    return ((sm - lo) / max(hi - lo, 1e-9)).astype(np.float32)


def _warp_field(h, w, rng, max_disp=0.5, control=4):
    from scipy.ndimage import zoom
    ctrl = rng.uniform(-1, 1, size=(2, control, control))
    field = zoom(ctrl, (1, h / control, w / control), order=3)
    peak = np.abs(field).max()
    return (field * (max_disp / max(peak, 1e-9))).astype(np.float32)


def make_recipe(kind: str, target: int, poison_rate: float, image_shape,
                seed: int = 0, donor_class: Optional[int] = None,
                **overrides) -> PoisonRecipe:
    """Build a recipe with deterministic default assets for an image shape."""
    h, w, c = image_shape
    rng = np.random.default_rng(np.random.PCG64(seed))
    assets: dict = {}
    if kind in ("patch", "dynamic", "inputaware-lite"):
        frac = overrides.pop("area_fraction", 0.046 if kind == "patch" else 0.06)
        budget = int(round(frac * h * w))
        side = math.ceil(math.sqrt(budget))
        # high-contrast binary pattern so the trigger survives superposition
        pattern = rng.integers(0, 2, size=(side, side, c)).astype(np.float32)
        assets = {"pixel_budget": budget, "pattern": pattern,
                  "location": (h // 8, w // 8)}
        if kind in ("dynamic", "inputaware-lite"):
            assets["anchors"] = _anchor_grid(h, w, side)
    elif kind == "composite":
        assets = {"donor_class": int(donor_class if donor_class is not None
                                     else (target + 1) % 10),
                  "side": overrides.pop("side", "left")}
    elif kind == "warp":
        assets = {"field": _warp_field(h, w, rng,
                                       max_disp=overrides.pop("max_disp", 0.5))}
    elif kind == "blend":
        assets = {"alpha": overrides.pop("alpha", 0.2),
                  "pattern": rng.uniform(0, 1, size=(h, w, c)).astype(np.float32)}
    elif kind == "reflection":
        assets = {"alpha": overrides.pop("alpha", 0.15),
                  "pattern": _smooth_field(h, w, c, rng, blur=2.0)}
    elif kind == "sig":
        assets = {"amplitude": overrides.pop("amplitude", 20.0 / 255.0),
                  "frequency": overrides.pop("frequency", 4)}
    elif kind == "filter":
        # color projection (idempotent restyle) plus optional offsets
        mix = np.tile(np.asarray(GRAY_WEIGHTS, dtype=np.float32), (3, 1))
        assets = {"mix": overrides.pop("mix", mix),
                  "offset": overrides.pop("offset", np.zeros(3, dtype=np.float32))}
    assets.update(overrides)
    return PoisonRecipe(kind=kind, target=target, poison_rate=poison_rate, assets=assets)


# ---------------------------------------------------------------------------
# Stamping


def _place_block(img, assets, top, left):
    h, w, _ = img.shape
    mask, side = _block_mask(h, w, assets["pixel_budget"], top, left)
    out = img.copy()
    block = np.zeros_like(img)
    block[top:top + side, left:left + side, :] = assets["pattern"][:min(side, h - top),
                                                                   :min(side, w - left)]
    out[mask] = block[mask]
    return out


def _quadrant_anchor(img, n_anchors):
    h, w, _ = img.shape
    quads = [img[:h // 2, :w // 2], img[:h // 2, w // 2:],
             img[h // 2:, :w // 2], img[h // 2:, w // 2:]]
    code = 0
    for i, q in enumerate(quads):
        code = code * 1009 + int(round(float(q.mean()) * 255.0)) * (i + 1)
    return code % n_anchors


def _apply_warp(images_nchw: torch.Tensor, field: np.ndarray) -> torch.Tensor:
    n, _, h, w = images_nchw.shape
    dy = torch.from_numpy(field[0])
    dx = torch.from_numpy(field[1])
    ys = torch.arange(h, dtype=torch.float32).view(-1, 1).expand(h, w) + dy
    xs = torch.arange(w, dtype=torch.float32).view(1, -1).expand(h, w) + dx
    grid = torch.stack([xs / (w - 1) * 2 - 1, ys / (h - 1) * 2 - 1], dim=-1)
    grid = grid.unsqueeze(0).expand(n, h, w, 2)
    return torch.nn.functional.grid_sample(images_nchw, grid, mode="bilinear",
                                           padding_mode="border", align_corners=True)


def stamp(recipe: PoisonRecipe, image: np.ndarray,
          rng_state: Optional[np.random.Generator] = None,
          donor_pool: Optional[np.ndarray] = None) -> np.ndarray:
    """Stamp one (H, W, C) image in [0, 1]; deterministic given rng_state.

    Only input-specific kinds consume randomness: dynamic placement and the
    composite donor pick. Composite needs a donor_pool of donor-class images.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {img.shape}")
    kind, assets = recipe.kind, recipe.assets
    h, w, _ = img.shape
    if kind == "patch":
        top, left = assets["location"]
        return _place_block(img, assets, top, left)
    if kind == "dynamic":
        if rng_state is None:
            raise ValueError("dynamic stamping needs an rng_state")
        top, left = assets["anchors"][int(rng_state.integers(len(assets["anchors"])))]
        return _place_block(img, assets, top, left)
    if kind == "inputaware-lite":
        top, left = assets["anchors"][_quadrant_anchor(img, len(assets["anchors"]))]
        return _place_block(img, assets, top, left)
    if kind == "composite":
        if donor_pool is None or len(donor_pool) == 0:
            raise ValueError("composite stamping needs a donor_pool")
        if rng_state is None:
            raise ValueError("composite stamping needs an rng_state")
        donor = donor_pool[int(rng_state.integers(len(donor_pool)))]
        out = img.copy()
        if assets["side"] == "left":
            out[:, :w // 2] = donor[:, :w // 2]
        else:
            out[:, w // 2:] = donor[:, w // 2:]
        return out
    if kind == "warp":
        x = torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0)
        out = _apply_warp(x, assets["field"])
        return out.squeeze(0).permute(1, 2, 0).numpy().clip(0.0, 1.0)
    if kind in ("blend", "reflection"):
        a = assets["alpha"]
        return np.clip((1 - a) * img + a * assets["pattern"], 0.0, 1.0)
    if kind == "sig":
        amp, freq = assets["amplitude"], assets["frequency"]
        cols = np.arange(w, dtype=np.float64)
        wave = amp * np.sin(2.0 * np.pi * cols * freq / w)
        return np.clip(img + wave.astype(np.float32)[None, :, None], 0.0, 1.0)
    if kind == "filter":
        mixed = img @ np.asarray(assets["mix"], dtype=np.float32).T \
            + np.asarray(assets["offset"], dtype=np.float32)
        return np.clip(mixed, 0.0, 1.0)
    raise ValueError(f"unknown attack kind {kind!r}")


def stamp_batch(recipe: PoisonRecipe, images: np.ndarray, seed: int = 0,
                donor_pool: Optional[np.ndarray] = None) -> np.ndarray:
    """Stamp a batch deterministically; one child rng per image."""
    rngs = np.random.default_rng(np.random.PCG64(seed)).spawn(len(images))
    return np.stack([stamp(recipe, img, rng_state=r, donor_pool=donor_pool)
                     for img, r in zip(images, rngs)])


class RecipeTrigger:
    """Adapts a recipe to the trigger protocol used by ASR evaluation."""

    kind = "recipe"

    def __init__(self, recipe: PoisonRecipe, seed: int = 0,
                 donor_pool: Optional[np.ndarray] = None):
        self.recipe = recipe
        self.seed = seed
        self.donor_pool = donor_pool

    def apply_batch(self, x: torch.Tensor, hard=None, clamp=True) -> torch.Tensor:
        imgs = x.detach().permute(0, 2, 3, 1).numpy()
        out = stamp_batch(self.recipe, imgs, seed=self.seed, donor_pool=self.donor_pool)
        return torch.from_numpy(out).permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Poisoned datasets and models


def make_poisoned_dataset(data: ImageSet, recipe: PoisonRecipe, seed: int = 0):
    """Stamp and relabel a poison_rate fraction of the set.

    Returns (poisoned ImageSet, sorted poison index). Samples are drawn from
    non-target classes so every poisoned sample actually changes label.
    """
    n_poison = int(round(recipe.poison_rate * len(data)))
    if recipe.poison_rate > 0 and n_poison < 1:
        raise ValueError(f"dataset of {len(data)} samples is too small for "
                         f"rate {recipe.poison_rate}")
    if n_poison == 0:
        return ImageSet(data.images.copy(), data.labels.copy()), np.array([], dtype=np.int64)
    rng = np.random.default_rng(np.random.PCG64(seed))
    eligible = np.nonzero(data.labels != recipe.target)[0]
    if len(eligible) < n_poison:
        raise ValueError("not enough non-target samples to poison")
    chosen = np.sort(rng.choice(eligible, size=n_poison, replace=False))
    donor_pool = None
    if recipe.kind == "composite":
        donor_idx = data.class_indices(recipe.assets["donor_class"])
        donor_pool = data.images[donor_idx]
    images = data.images.copy()
    labels = data.labels.copy()
    stamp_rngs = rng.spawn(n_poison)
    for i, r in zip(chosen, stamp_rngs):
        images[i] = stamp(recipe, images[i], rng_state=r, donor_pool=donor_pool)
        labels[i] = recipe.target
    return ImageSet(images, labels), chosen


def recipe_asr(model: ClassifierHandle, recipe: PoisonRecipe, data: ImageSet,
               seed: int = 0) -> float:
    """ASR of the injected trigger on freshly stamped held-out victims."""
    victims = np.nonzero(data.labels != recipe.target)[0]
    if len(victims) == 0:
        raise ValueError("no victim samples available")
    donor_pool = None
    if recipe.kind == "composite":
        donor_pool = data.images[data.class_indices(recipe.assets["donor_class"])]
    stamped = stamp_batch(recipe, data.images[victims], seed=seed, donor_pool=donor_pool)
    preds = model.predict(stamped)
    return float(np.mean(preds == recipe.target))


def train_backdoored_model(dataset: DatasetSplits, recipe: PoisonRecipe,
                           architecture: str = "plainconv",
                           config: Optional[TrainConfig] = None, seed: int = 0,
                           clean_reference_accuracy: Optional[float] = None,
                           asr_target: float = 0.95,
                           max_accuracy_drop: float = 3.0) -> ClassifierHandle:
    """Train on a poisoned copy of the training split.

    Fails (TrainingFailure with diagnostics) if the injected trigger does not
    reach *asr_target* on held-out victims, or if clean accuracy drops more
    than *max_accuracy_drop* points below the given clean twin accuracy.
    """
    poisoned_train, poison_idx = make_poisoned_dataset(dataset.train, recipe, seed=seed)
    poisoned = DatasetSplits(dataset.name, poisoned_train, dataset.val, dataset.test,
                             dataset.num_classes)
    config = config or TrainConfig(epochs=8)
    handle = train_classifier(architecture, poisoned, config=config, seed=seed,
                              provenance=f"poisoned:{recipe.kind}",
                              accuracy_floor=ACCURACY_FLOOR)
    asr = recipe_asr(handle, recipe, dataset.test, seed=seed + 1)
    diagnostics = {"asr": asr, "accuracy": handle.meta.accuracy,
                   "poisoned": int(len(poison_idx))}
    if asr < asr_target:
        raise TrainingFailure(f"injected ASR {asr:.4f} below target {asr_target}",
                              diagnostics=diagnostics)
    if clean_reference_accuracy is not None:
        drop = (clean_reference_accuracy - handle.meta.accuracy) * 100.0
        diagnostics["accuracy_drop_points"] = drop
        if drop > max_accuracy_drop:
            raise TrainingFailure(
                f"clean accuracy dropped {drop:.2f} points (limit {max_accuracy_drop})",
                diagnostics=diagnostics)
    handle.meta.train_config["poison"] = {"kind": recipe.kind, "target": recipe.target,
                                          "rate": recipe.poison_rate}
    return handle


# ---------------------------------------------------------------------------
# Calibration of regulation budgets from injected attacks


def measure_recipe_distance(recipe: PoisonRecipe, data: ImageSet,
                            spec: RegulationSpec, encoder=None, seed: int = 0,
                            sample_count: int = 64) -> float:
    """Mean regulation-space distance between clean and stamped samples.

    This is how desk budgets are calibrated: the scanners' bounds come from
    measuring the injected attacks with the same spec used to judge them.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    idx = rng.choice(len(data), size=min(sample_count, len(data)), replace=False)
    imgs = data.images[idx]
    donor_pool = None
    if recipe.kind == "composite":
        donor_pool = data.images[data.class_indices(recipe.assets["donor_class"])]
    stamped = stamp_batch(recipe, imgs, seed=seed + 1, donor_pool=donor_pool)
    x = torch.from_numpy(imgs).permute(0, 3, 1, 2)
    gx = torch.from_numpy(stamped).permute(0, 3, 1, 2)
    diff = (gx - x).reshape(len(x), -1)
    if (spec.space, spec.metric) == ("pixel", "L0"):
        per_channel = (gx - x).abs() > 1e-6
        changed = per_channel.any(dim=1).reshape(len(x), -1)
        return float(changed.sum(dim=1).float().mean())
    if (spec.space, spec.metric) == ("pixel", "Linf"):
        return float(diff.abs().max(dim=1).values.mean())
    if (spec.space, spec.metric) == ("pixel", "L2"):
        return float(diff.norm(dim=1).mean())
    if (spec.space, spec.metric) == ("feature", "L2"):
        if encoder is None:
            from .triggers import get_encoder_pair
            encoder = get_encoder_pair(spec.projection).encoder
        with torch.no_grad():
            za = encoder(gx).reshape(len(x), -1)
            zb = encoder(x).reshape(len(x), -1)
        return float((za - zb).norm(dim=1).mean())
    if (spec.space, spec.metric) == ("frequency", "L1"):
        h, w = x.shape[-2:]
        sdiff = torch.fft.fft2(gx) - torch.fft.fft2(x)
        return float(sdiff.abs().reshape(len(x), -1).sum(dim=1).mean() / (h * w))
    raise ValueError(f"no measurement rule for {spec.space}/{spec.metric}")


# ---------------------------------------------------------------------------
# Serialization and inspection


def recipe_to_config(recipe: PoisonRecipe) -> str:
    """Human-readable YAML block; arrays become nested lists."""
    def clean(v):
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, tuple):
            return list(v)
        if isinstance(v, (np.integer, np.floating)):
            return v.item()
        if isinstance(v, list):
            return [clean(item) for item in v]
        return v
    doc = {"kind": recipe.kind, "target": recipe.target,
           "poison_rate": recipe.poison_rate,
           "assets": {k: clean(v) for k, v in recipe.assets.items()}}
    return yaml.safe_dump(doc, sort_keys=True)


_ARRAY_ASSETS = {"pattern", "field", "mix", "offset"}


def recipe_from_config(text: str) -> PoisonRecipe:
    doc = yaml.safe_load(text)
    assets = {}
    for k, v in doc["assets"].items():
        if k in _ARRAY_ASSETS:
            assets[k] = np.asarray(v, dtype=np.float32)
        elif k == "anchors":
            assets[k] = [tuple(a) for a in v]
        elif k == "location":
            assets[k] = tuple(v)
        else:
            assets[k] = v
    return PoisonRecipe(kind=doc["kind"], target=doc["target"],
                        poison_rate=doc["poison_rate"], assets=assets)


def export_examples(recipe: PoisonRecipe, data: ImageSet, out_dir, count: int = 4,
                    seed: int = 0) -> list:
    """Write clean/stamped PNG pairs for visual inspection."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(seed))
    idx = rng.choice(len(data), size=min(count, len(data)), replace=False)
    donor_pool = None
    if recipe.kind == "composite":
        donor_pool = data.images[data.class_indices(recipe.assets["donor_class"])]
    stamped = stamp_batch(recipe, data.images[idx], seed=seed + 1, donor_pool=donor_pool)
    paths = []
    for i, (orig, mod) in enumerate(zip(data.images[idx], stamped)):
        pair = np.concatenate([orig, mod], axis=1)
        img = Image.fromarray((pair * 255).round().astype(np.uint8))
        p = out_dir / f"{recipe.kind}_example_{i}.png"
        img.save(p)
        paths.append(p)
    return paths
