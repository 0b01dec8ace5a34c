"""Objective terms for trigger inversion.

The total objective is ``exploitation + lambda * bound_loss(distance)``:
cross-entropy toward the target class plus a polynomial penalty that blows
up as the trigger's regulation-space distance approaches its budget. The
distance dispatch depends on the regulation space and metric; L0 gets a
smooth sigmoid surrogate for gradients with the exact count recorded
alongside.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .core import ClassifierHandle, RegulationSpec
from .triggers import LocalizedTrigger, get_encoder_pair

__all__ = [
    "ConfigurationError",
    "UnsupportedCombinationError",
    "ObjectiveConfig",
    "DistancePair",
    "LambdaController",
    "bound_loss",
    "regulation_distance",
    "exploitation_loss",
    "total_objective",
    "objective_parts",
]

# Temperature of the smooth L0 surrogate: sum of sigmoid(t * (m - 0.5)).
L0_SURROGATE_TEMPERATURE = 50.0


class ConfigurationError(ValueError):
    """A regulation spec cannot be evaluated as configured."""


class UnsupportedCombinationError(ValueError):
    """The regulation spec does not apply to this trigger kind."""


@dataclass
class ObjectiveConfig:
    """Knobs of the inversion objective; classification loss is cross-entropy."""

    regulation_weight: float = 1e-3     # lambda, adapted during scanning
    loss_scale: float = 1.0             # k of the bound loss
    loss_power: float = 2.0             # b of the bound loss, > 1
    asr_floor: float = 0.80

    def __post_init__(self):
        if self.regulation_weight < 0:
            raise ValueError("regulation_weight must be non-negative")
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be positive")
        if self.loss_power <= 1:
            raise ValueError("loss_power must exceed 1")


@dataclass
class DistancePair:
    """Batch-mean regulation distance: smooth value for gradients, exact for
    reporting/validity. They coincide except for the L0 surrogate."""

    smooth: torch.Tensor
    exact: float


class LambdaController:
    """Adaptive schedule for the regulation weight.

    Multiplies lambda by 1.5 after 5 consecutive steps with batch ASR at or
    above the floor, divides by 1.5 after 5 consecutive steps below, and
    clamps to [1e-5, 1e2]. Owned by a single scan task.
    """

    PATIENCE = 5
    FACTOR = 1.5
    BOUNDS = (1e-5, 1e2)

    def __init__(self, initial: float = 1e-3, asr_floor: float = 0.80):
        self.value = float(initial)
        self.asr_floor = asr_floor
        self._up = 0
        self._down = 0

    def update(self, batch_asr: float) -> float:
        if batch_asr >= self.asr_floor:
            self._up += 1
            self._down = 0
            if self._up >= self.PATIENCE:
                self.value = min(self.value * self.FACTOR, self.BOUNDS[1])
                self._up = 0
        else:
            self._down += 1
            self._up = 0
            if self._down >= self.PATIENCE:
                self.value = max(self.value / self.FACTOR, self.BOUNDS[0])
                self._down = 0
        return self.value


def bound_loss(distance, spec: RegulationSpec):
    """Polynomial budget penalty: k * (distance / bound) ** b."""
    if spec.bound == 0:
        raise ConfigurationError("bound loss needs a positive bound")
    d = distance if isinstance(distance, torch.Tensor) else torch.as_tensor(float(distance))
    return spec.loss_scale * (d / spec.bound) ** spec.loss_power


def _mask_batch(trigger, x, spec):
    if not isinstance(trigger, LocalizedTrigger):
        raise UnsupportedCombinationError(
            f"{spec.metric} regulation of the mask requires a localized trigger, "
            f"got {trigger.kind}")
    return trigger.masks(x, hard=False)


def regulation_distance(trigger, x: torch.Tensor, spec: RegulationSpec,
                        encoder=None, transformed=None) -> DistancePair:
    """Batch-mean distance of the trigger's change in the regulation space.

    Dispatch: pixel/L0 counts mask entries (smooth surrogate + exact count);
    pixel/L2 is the per-sample norm of the pre-clamp pixel change;
    pixel/Linf is the mask's maximum value; feature/L2 runs the named
    encoder on original and pre-clamp transformed images; frequency/L1 sums
    absolute spectral change normalized by the H*W coefficient count.
    Per-sample distances are averaged left to right over the batch.
    *transformed* may carry a precomputed pre-clamp ``apply_batch`` result.
    """
    key = (spec.space, spec.metric)
    if key == ("pixel", "L0"):
        m = _mask_batch(trigger, x, spec)
        flat = m.reshape(m.shape[0], -1)
        smooth = torch.sigmoid(L0_SURROGATE_TEMPERATURE * (flat - 0.5)).sum(dim=1).mean()
        exact = float((flat > 0.5).sum(dim=1).float().mean())
        return DistancePair(smooth, exact)
    if key == ("pixel", "Linf"):
        m = _mask_batch(trigger, x, spec)
        smooth = m.reshape(m.shape[0], -1).max(dim=1).values.mean()
        return DistancePair(smooth, float(smooth.detach()))
    if transformed is None and key[0] in ("pixel", "feature", "frequency"):
        transformed = trigger.apply_batch(x, hard=False, clamp=False)
    if key == ("pixel", "L2"):
        diff = (transformed - x).reshape(x.shape[0], -1)
        smooth = diff.norm(dim=1).mean()
        return DistancePair(smooth, float(smooth.detach()))
    if key == ("feature", "L2"):
        enc = encoder
        if enc is None:
            try:
                enc = get_encoder_pair(spec.projection).encoder
            except KeyError as err:
                raise ConfigurationError(str(err)) from None
        za = enc(transformed).reshape(x.shape[0], -1)
        zb = enc(x).reshape(x.shape[0], -1)
        smooth = (za - zb).norm(dim=1).mean()
        return DistancePair(smooth, float(smooth.detach()))
    if key == ("frequency", "L1"):
        diff = torch.fft.fft2(transformed) - torch.fft.fft2(x)
        h, w = x.shape[-2:]
        smooth = diff.abs().reshape(x.shape[0], -1).sum(dim=1).mean() / (h * w)
        return DistancePair(smooth, float(smooth.detach()))
    raise UnsupportedCombinationError(
        f"no regulation rule for space={spec.space!r} metric={spec.metric!r}")


def exploitation_loss(model: ClassifierHandle, trigger, x: torch.Tensor,
                      target: int) -> torch.Tensor:
    """Mean cross-entropy of the stamped batch toward the target class."""
    if len(x) == 0:
        raise ValueError("exploitation loss needs a non-empty batch")
    stamped = trigger.apply_batch(x, hard=False, clamp=True)
    logits = model.logits(stamped)
    targets = torch.full((len(x),), int(target), dtype=torch.long)
    return torch.nn.functional.cross_entropy(logits, targets)


@dataclass
class ObjectiveParts:
    exploitation: torch.Tensor
    distance: DistancePair
    bound_penalty: torch.Tensor
    total: torch.Tensor


def objective_parts(model, trigger, x, target, spec, config: ObjectiveConfig,
                    encoder=None, regulation_weight: Optional[float] = None) -> ObjectiveParts:
    lam = config.regulation_weight if regulation_weight is None else regulation_weight
    exploit = exploitation_loss(model, trigger, x, target)
    dist = regulation_distance(trigger, x, spec, encoder=encoder)
    penalty = bound_loss(dist.smooth, spec)
    return ObjectiveParts(exploit, dist, penalty, exploit + lam * penalty)


def total_objective(model, trigger, x, target, spec, config: ObjectiveConfig,
                    encoder=None) -> torch.Tensor:
    """Exploitation loss plus weighted bound loss on the regulation distance."""
    return objective_parts(model, trigger, x, target, spec, config, encoder=encoder).total
