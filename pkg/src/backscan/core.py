"""Domain types and the operational backdoor criteria.

A model is considered backdoored when a trigger transformation flips enough
samples to a target class (attack success rate) while staying within a
distance bound measured in a regulation space. This module holds the value
types for that judgement, the metric functions, and the accuracy/ASR
measurements everything else builds on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np
import torch

from ._validation import check_image_batch, check_labels, check_finite, to_numpy_images

__all__ = [
    "ACCURACY_FLOOR",
    "ASR_FLOOR",
    "L0_TOLERANCE",
    "ImageSample",
    "ImageSet",
    "ModelBundle",
    "ClassifierHandle",
    "RegulationSpec",
    "BackdoorVerdict",
    "metric_distance",
    "evaluate_accuracy",
    "attack_success_rate",
    "validate_verdict",
]

# Operational thresholds for desk-scale models: a model must clear the
# accuracy floor to count as functional, a trigger must clear the ASR floor
# to count as exploitable.
ACCURACY_FLOOR = 0.80
ASR_FLOOR = 0.80

# Entries with magnitude at or below this count as zero for L0 purposes;
# optimization leaves sub-epsilon residues that must not count.
L0_TOLERANCE = 1e-12

METRICS = ("L0", "L1", "L2", "Linf")
SPACES = ("pixel", "feature", "frequency")


@dataclass
class ImageSample:
    """One image with its class label. Pixels are (H, W, C) float in [0, 1]."""

    pixels: np.ndarray
    label: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be (H, W, C), got shape {self.pixels.shape}")
        check_finite(self.pixels, "pixels")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if int(self.label) < 0:
            raise ValueError("label must be non-negative")
        self.label = int(self.label)


class ImageSet:
    """A labelled image batch: images (N, H, W, C) float32 in [0, 1], labels (N,)."""

    def __init__(self, images, labels):
        if isinstance(images, torch.Tensor):
            images = to_numpy_images(images)
        self.images = np.ascontiguousarray(np.asarray(images, dtype=np.float32))
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        self.labels = check_labels(labels)
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> ImageSample:
        return ImageSample(self.images[i], int(self.labels[i]))

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "ImageSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx])

    def class_indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]

    def tensors(self):
        """(images NCHW float32, labels int64) torch pair."""
        x = torch.from_numpy(self.images).permute(0, 3, 1, 2).contiguous()
        y = torch.from_numpy(self.labels)
        return x, y


@dataclass
class ModelBundle:
    """Metadata travelling with a trained classifier."""

    architecture: str
    dataset: str
    accuracy: float
    seed: int
    provenance: str = "clean"           # clean | poisoned:<kind> | hardened:<scanner>
    train_config: dict = field(default_factory=dict)
    weights_path: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelBundle":
        return cls(**json.loads(text))


class ClassifierHandle:
    """A classifier in evaluation mode plus its metadata.

    ``logits`` is differentiable and torch-native; ``predict`` /
    ``predict_logits`` are the batched, gradient-free numpy surface.
    """

    def __init__(self, module: torch.nn.Module, num_classes: int, meta: ModelBundle,
                 batch_size: int = 256):
        self.module = module.eval()
        self.num_classes = int(num_classes)
        self.meta = meta
        self.batch_size = batch_size
        for p in self.module.parameters():
            p.requires_grad_(False)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable forward pass on an NCHW tensor in [0, 1]."""
        out = self.module(x)
        return out

    def predict_logits(self, X) -> np.ndarray:
        x = check_image_batch(X)
        outs = []
        with torch.no_grad():
            for i in range(0, len(x), self.batch_size):
                outs.append(self.module(x[i:i + self.batch_size]))
        logits = torch.cat(outs).cpu().numpy()
        check_finite(logits, "logits")
        return logits

    def predict(self, X) -> np.ndarray:
        return self.predict_logits(X).argmax(axis=1)


@dataclass
class RegulationSpec:
    """Where and how the trigger's change is measured, and how big it may be.

    ``space`` picks the measurement domain, ``projection`` the map into it
    (identity for pixels, a registered encoder id for features, ``dft`` for
    the frequency domain), ``metric`` the norm, ``bound`` the budget, and
    ``loss_scale``/``loss_power`` parameterize the polynomial bound loss.
    """

    space: str
    metric: str
    bound: float
    projection: str = "identity"
    loss_scale: float = 1.0
    loss_power: float = 2.0

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown regulation space {self.space!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not np.isfinite(self.bound) or self.bound < 0:
            raise ValueError("bound must be finite and non-negative")
        if self.space == "feature" and self.projection in ("identity", "dft"):
            raise ValueError("feature space requires a named encoder projection")
        if self.space == "frequency" and self.projection != "dft":
            raise ValueError("frequency space requires the dft projection")
        if self.space == "pixel" and self.projection != "identity":
            raise ValueError("pixel space uses the identity projection")
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be positive")
        if self.loss_power <= 1:
            raise ValueError("loss_power must exceed 1")


@dataclass
class BackdoorVerdict:
    """Outcome of judging one trigger against one model."""

    asr: float
    regulation_distance: float
    bound: float
    valid: bool
    target: int
    victim: Optional[int] = None
    trigger_ref: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.asr <= 1.0:
            raise ValueError("asr must lie in [0, 1]")
        if self.regulation_distance < 0:
            raise ValueError("regulation_distance must be non-negative")


def _flat(z) -> torch.Tensor:
    if isinstance(z, torch.Tensor):
        return z.reshape(-1)
    return torch.from_numpy(np.asarray(z, dtype=np.float64)).reshape(-1)


def metric_distance(z0, z1, metric: str):
    """Distance between two equally shaped value grids.

    L0 counts entries differing by more than ``L0_TOLERANCE``; L1/L2/Linf are
    the usual norms of the difference. Returns a float for array inputs and a
    scalar tensor (differentiable, except L0) for tensor inputs.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    shape0 = tuple(z0.shape) if hasattr(z0, "shape") else np.shape(z0)
    shape1 = tuple(z1.shape) if hasattr(z1, "shape") else np.shape(z1)
    if shape0 != shape1:
        raise ValueError(f"shape mismatch: {shape0} vs {shape1}")
    torch_input = isinstance(z0, torch.Tensor) or isinstance(z1, torch.Tensor)
    a, b = _flat(z0), _flat(z1)
    if a.is_complex() or b.is_complex():
        diff = (a.to(torch.complex128) - b.to(torch.complex128)).abs()
    else:
        diff = (a - b).abs()
    if metric == "L0":
        value = (diff > L0_TOLERANCE).sum().to(torch.float64)
    elif metric == "L1":
        value = diff.sum()
    elif metric == "L2":
        value = (diff ** 2).sum().sqrt()
    else:
        value = diff.max() if diff.numel() else diff.new_zeros(())
    return value if torch_input else float(value)


def evaluate_accuracy(model: ClassifierHandle, data: ImageSet) -> float:
    """Fraction of samples whose argmax logit matches the label."""
    if len(data) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    preds = model.predict(data.images)
    return float(np.mean(preds == data.labels))


def _eligible_indices(labels: np.ndarray, target: int, victim: Optional[int]) -> np.ndarray:
    if victim is not None:
        if victim == target:
            raise ValueError("victim class must differ from target")
        return np.nonzero(labels == victim)[0]
    return np.nonzero(labels != target)[0]


def attack_success_rate(model: ClassifierHandle, trigger, data: ImageSet, target: int,
                        victim: Optional[int] = None) -> float:
    """Fraction of eligible samples predicted as *target* after stamping.

    Universal mode uses every non-target sample; label-specific mode only
    the victim class. *trigger* must expose ``apply_batch(x_nchw) -> tensor``.
    """
    idx = _eligible_indices(data.labels, target, victim)
    if len(idx) == 0:
        raise ValueError("no eligible samples for ASR evaluation")
    sub = data.subset(idx)
    x, _ = sub.tensors()
    with torch.no_grad():
        stamped = trigger.apply_batch(x)
    preds = model.predict(stamped)
    return float(np.mean(preds == target))


def validate_verdict(verdict: BackdoorVerdict, reference_bound: float,
                     asr_floor: float = ASR_FLOOR) -> bool:
    """A verdict is valid iff the distance is within the injected-attack
    reference bound (inclusive) and the ASR clears the floor (inclusive)."""
    return (verdict.regulation_distance <= reference_bound
            and verdict.asr >= asr_floor)
