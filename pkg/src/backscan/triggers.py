"""Trigger transformation templates.

Three families cover the backdoor transformations the scanners invert:

* localized — blend a pattern into the image under a mask, where mask and
  pattern are constants or per-input conv generators;
* pervasive — encode the image, run one conv layer on the representation,
  decode back;
* frequency — swap masked Fourier coefficients for a learned complex pattern.

All triggers expose ``apply_batch`` on NCHW tensors, keep their parameters
as torch leaves so the scanner can optimize them, and serialize to a
self-describing archive.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from ._validation import check_finite
from .core import RegulationSpec

__all__ = [
    "dft",
    "spectrum",
    "ConstantGrid",
    "SigmoidGrid",
    "ConvGenerator",
    "ImageMixture",
    "LocalizedTrigger",
    "PervasiveTrigger",
    "FrequencyTrigger",
    "register_encoder_pair",
    "get_encoder_pair",
    "encoder_registry_ids",
    "save_trigger",
    "load_trigger",
]

# Mask values below this count as "off" when a trigger is applied in hard
# mode; matches the midpoint of the smooth L0 surrogate.
HARD_MASK_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# Fourier projection


def dft(image_channel, direction: str):
    """2-D discrete Fourier transform of one channel (forward unnormalized).

    ``forward`` maps a real M×N grid to its complex spectrum where the (0, 0)
    coefficient is the plain pixel sum; ``inverse`` undoes it exactly.
    """
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    arr = np.asarray(image_channel)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d grid, got shape {arr.shape}")
    check_finite(arr, "dft input")
    if direction == "forward":
        if np.iscomplexobj(arr):
            raise ValueError("forward dft expects a real grid")
        return np.fft.fft2(arr.astype(np.float64))
    return np.fft.ifft2(arr.astype(np.complex128))


def spectrum(x: torch.Tensor) -> torch.Tensor:
    """Per-channel unnormalized 2-D FFT of an NCHW batch."""
    return torch.fft.fft2(x)


# ---------------------------------------------------------------------------
# Mask / pattern sources for the localized template


class ConstantGrid(nn.Module):
    """A fixed grid broadcast over the batch; not optimized."""

    def __init__(self, values):
        super().__init__()
        t = torch.as_tensor(np.asarray(values), dtype=torch.float32)
        if t.ndim == 2:
            t = t.unsqueeze(0)            # (1, H, W), broadcasts over channels
        self.register_buffer("values", t)

    def forward(self, x):
        return self.values.unsqueeze(0).expand(x.shape[0], *self.values.shape)


class SigmoidGrid(nn.Module):
    """An unconstrained grid squashed through a sigmoid into [0, 1]."""

    def __init__(self, shape, init=0.0, generator: Optional[torch.Generator] = None):
        super().__init__()
        if generator is not None:
            raw = torch.randn(shape, generator=generator) * 0.1 + init
        else:
            raw = torch.full(shape, float(init))
        self.raw = nn.Parameter(raw)

    def forward(self, x):
        vals = torch.sigmoid(self.raw)
        if vals.ndim == 2:
            vals = vals.unsqueeze(0)
        return vals.unsqueeze(0).expand(x.shape[0], *vals.shape)


class ConvGenerator(nn.Module):
    """Small conv net mapping an image to a per-input mask or pattern field.

    Three 3×3 conv layers, sigmoid output, spatial size preserved.
    """

    def __init__(self, in_channels, out_channels, hidden=8,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, out_channels, 3, padding=1),
        )
        if generator is not None:
            with torch.no_grad():
                for p in self.net.parameters():
                    p.copy_(torch.randn(p.shape, generator=generator) * 0.05)
        self.out_channels = out_channels

    def forward(self, x):
        out = torch.sigmoid(self.net(x))
        if out.shape[-2:] != x.shape[-2:]:
            raise RuntimeError("generator output does not match the input's spatial shape")
        return out


class ImageMixture(nn.Module):
    """Pattern constrained to the convex hull of a bank of donor images."""

    def __init__(self, donors: torch.Tensor):
        super().__init__()
        if donors.ndim != 4 or len(donors) == 0:
            raise ValueError("donor bank must be a non-empty NCHW tensor")
        self.register_buffer("donors", donors.float())
        self.weights = nn.Parameter(torch.zeros(len(donors)))

    def forward(self, x):
        w = torch.softmax(self.weights, dim=0)
        mixed = torch.einsum("n,nchw->chw", w, self.donors)
        return mixed.unsqueeze(0).expand(x.shape[0], *mixed.shape)


class _TriggerBase(nn.Module):
    """Shared trigger surface: stateless transform over NCHW batches."""

    kind = "base"

    def __init__(self):
        super().__init__()
        self.eval_hard = False
        self.regulation: Optional[RegulationSpec] = None

    def apply_batch(self, x: torch.Tensor, hard: Optional[bool] = None,
                    clamp: bool = True) -> torch.Tensor:
        raise NotImplementedError

    def transform(self, x):
        """Estimator-style alias for ``apply_batch`` with default settings."""
        with torch.no_grad():
            return self.apply_batch(torch.as_tensor(x))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


class LocalizedTrigger(_TriggerBase):
    """Blend a pattern into the image where the mask is on.

    Output pixel = (1 - m) * x + m * pattern, so every output value lies
    between the input pixel and the pattern pixel. ``hard`` application
    zeroes mask entries below 0.5, snapping the change to its support.
    With ``straight_through`` set, soft application composes with the hard
    mask in the forward pass while gradients see the smooth one, which keeps
    optimization aligned with how pixel-count-bounded triggers are judged.
    """

    kind = "localized"

    def __init__(self, mask_source: nn.Module, pattern_source: nn.Module,
                 straight_through: bool = False):
        super().__init__()
        self.mask_source = mask_source
        self.pattern_source = pattern_source
        self.straight_through = straight_through

    def masks(self, x: torch.Tensor, hard: bool = False) -> torch.Tensor:
        m = self.mask_source(x)
        if m.shape[-2:] != x.shape[-2:]:
            raise RuntimeError("mask does not match the input's spatial shape")
        if hard:
            m = torch.where(m >= HARD_MASK_THRESHOLD, m, torch.zeros_like(m))
        return m

    def patterns(self, x: torch.Tensor) -> torch.Tensor:
        d = self.pattern_source(x)
        if d.shape[-2:] != x.shape[-2:]:
            raise RuntimeError("pattern does not match the input's spatial shape")
        return d

    def apply_batch(self, x, hard=None, clamp=True):
        hard = self.eval_hard if hard is None else hard
        m = self.masks(x, hard=hard)
        if self.straight_through and not hard:
            hard_m = torch.where(m >= HARD_MASK_THRESHOLD, m, torch.zeros_like(m))
            m = m + (hard_m - m).detach()
        d = self.patterns(x)
        out = (1.0 - m) * x + m * d
        return out.clamp(0.0, 1.0) if clamp else out


class PervasiveTrigger(_TriggerBase):
    """One conv layer acting on an autoencoder representation.

    The image is encoded, transformed by a 3×3 conv initialized near the
    identity, and decoded; the conv weights are the trigger parameters.
    """

    kind = "pervasive"

    def __init__(self, encoder_id: str, channels: int, noise: float = 0.01,
                 generator: Optional[torch.Generator] = None, decoder_id: Optional[str] = None):
        super().__init__()
        self.encoder_id = encoder_id
        self.decoder_id = decoder_id or encoder_id
        self.transform_conv = nn.Conv2d(channels, channels, 3, padding=1)
        with torch.no_grad():
            nn.init.dirac_(self.transform_conv.weight)
            if generator is not None:
                self.transform_conv.weight.add_(
                    torch.randn(self.transform_conv.weight.shape, generator=generator) * noise)
            self.transform_conv.bias.zero_()

    def _pair(self):
        return get_encoder_pair(self.encoder_id)

    def apply_batch(self, x, hard=None, clamp=True):
        pair = self._pair()
        z = pair.encoder(x)
        out = pair.decoder(self.transform_conv(z))
        return out.clamp(0.0, 1.0) if clamp else out


class FrequencyTrigger(_TriggerBase):
    """Swap masked Fourier coefficients for a learned complex pattern.

    The mask lives in [0, 1] per frequency coordinate and channel; the
    pattern is carried as separate real/imaginary planes so optimization
    stays real-valued. Output is the real part of the inverse transform,
    clamped to [0, 1].
    """

    kind = "frequency"

    def __init__(self, raw_mask: torch.Tensor, delta_re: torch.Tensor,
                 delta_im: torch.Tensor, fixed_mask: bool = False):
        super().__init__()
        self.fixed_mask = fixed_mask
        if fixed_mask:
            self.register_buffer("raw_mask", raw_mask.float())
        else:
            self.raw_mask = nn.Parameter(raw_mask.float())
        self.delta_re = nn.Parameter(delta_re.float())
        self.delta_im = nn.Parameter(delta_im.float())

    @classmethod
    def parameterized(cls, image_shape, generator: Optional[torch.Generator] = None,
                      mask_init: float = -2.0):
        """Fresh optimizable trigger for (C, H, W) images; mask starts mostly off."""
        c, h, w = image_shape
        if generator is not None:
            raw = torch.randn((c, h, w), generator=generator) * 0.1 + mask_init
            dre = torch.randn((c, h, w), generator=generator) * 0.1
            dim = torch.randn((c, h, w), generator=generator) * 0.1
        else:
            raw = torch.full((c, h, w), mask_init)
            dre = torch.zeros((c, h, w))
            dim = torch.zeros((c, h, w))
        return cls(raw, dre, dim)

    @classmethod
    def fixed(cls, mask, pattern):
        """Trigger with explicit mask in [0, 1] and complex pattern grids."""
        mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.float32)
        pat = np.asarray(pattern, dtype=np.complex128)
        trig = cls(mask_t, torch.from_numpy(pat.real.copy()).float(),
                   torch.from_numpy(pat.imag.copy()).float(), fixed_mask=True)
        return trig

    def mask(self) -> torch.Tensor:
        if self.fixed_mask:
            return self.raw_mask
        return torch.sigmoid(self.raw_mask)

    def pattern(self) -> torch.Tensor:
        return torch.complex(self.delta_re, self.delta_im)

    def apply_batch(self, x, hard=None, clamp=True):
        if self.raw_mask.shape[-2:] != x.shape[-2:]:
            raise ValueError("trigger grids do not match the image's spatial shape")
        m = self.mask().to(torch.complex64)
        delta = self.pattern().to(torch.complex64)
        spec = torch.fft.fft2(x)
        mixed = (1.0 - m) * spec + m * delta
        out = torch.fft.ifft2(mixed).real
        return out.clamp(0.0, 1.0) if clamp else out


# ---------------------------------------------------------------------------
# Encoder registry used by pervasive triggers and feature-space regulation

_ENCODER_REGISTRY: dict = {}


def register_encoder_pair(pair) -> None:
    """Make an encoder/decoder pair available under ``pair.encoder_id``."""
    _ENCODER_REGISTRY[pair.encoder_id] = pair


def get_encoder_pair(encoder_id: str):
    try:
        return _ENCODER_REGISTRY[encoder_id]
    except KeyError:
        raise KeyError(f"encoder id {encoder_id!r} is not registered") from None


def encoder_registry_ids():
    return sorted(_ENCODER_REGISTRY)


# ---------------------------------------------------------------------------
# Serialization

_FORMAT = "backscan-trigger-v1"


def save_trigger(trigger: _TriggerBase, path) -> None:
    """Write a self-describing archive that round-trips bit-exactly."""
    payload = {
        "format": _FORMAT,
        "kind": trigger.kind,
        "eval_hard": trigger.eval_hard,
        "regulation": None if trigger.regulation is None else vars(trigger.regulation),
        "state": trigger.state_dict(),
    }
    if trigger.kind == "localized":
        payload["sources"] = (_source_tag(trigger.mask_source),
                              _source_tag(trigger.pattern_source))
        payload["straight_through"] = trigger.straight_through
    elif trigger.kind == "pervasive":
        payload["encoder_id"] = trigger.encoder_id
        payload["decoder_id"] = trigger.decoder_id
        payload["channels"] = trigger.transform_conv.in_channels
    elif trigger.kind == "frequency":
        payload["fixed_mask"] = trigger.fixed_mask
        payload["shape"] = tuple(trigger.raw_mask.shape)
    torch.save(payload, path)


def _source_tag(src: nn.Module):
    if isinstance(src, ConstantGrid):
        return ("constant", tuple(src.values.shape))
    if isinstance(src, SigmoidGrid):
        return ("sigmoid", tuple(src.raw.shape))
    if isinstance(src, ConvGenerator):
        first = src.net[0]
        return ("generator", (first.in_channels, src.out_channels))
    if isinstance(src, ImageMixture):
        return ("mixture", tuple(src.donors.shape))
    raise TypeError(f"unknown source type {type(src).__name__}")


def _build_source(tag):
    name, shape = tag
    if name == "constant":
        return ConstantGrid(torch.zeros(shape))
    if name == "sigmoid":
        return SigmoidGrid(shape)
    if name == "generator":
        return ConvGenerator(shape[0], shape[1])
    if name == "mixture":
        return ImageMixture(torch.zeros(shape))
    raise ValueError(f"unknown source tag {name!r}")


def load_trigger(path) -> _TriggerBase:
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != _FORMAT:
        raise ValueError(f"not a trigger archive: {path}")
    kind = payload["kind"]
    if kind == "localized":
        mask_tag, pattern_tag = payload["sources"]
        trig = LocalizedTrigger(_build_source(mask_tag), _build_source(pattern_tag),
                                straight_through=payload.get("straight_through", False))
    elif kind == "pervasive":
        trig = PervasiveTrigger(payload["encoder_id"], payload["channels"],
                                decoder_id=payload["decoder_id"])
    elif kind == "frequency":
        shape = payload["shape"]
        trig = FrequencyTrigger(torch.zeros(shape), torch.zeros(shape),
                                torch.zeros(shape), fixed_mask=payload["fixed_mask"])
    else:
        raise ValueError(f"unknown trigger kind {kind!r}")
    trig.load_state_dict(payload["state"])
    trig.eval_hard = payload["eval_hard"]
    if payload["regulation"] is not None:
        trig.regulation = RegulationSpec(**payload["regulation"])
    return trig
