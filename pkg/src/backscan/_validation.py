"""Input validation helpers shared across the package.

Public entry points accept either numpy arrays in (N, H, W, C) layout or
torch tensors in (N, C, H, W) layout; internally everything runs on torch
float32 NCHW tensors in [0, 1].
"""

from __future__ import annotations

import numpy as np
import torch

__all__ = [
    "check_image_batch",
    "check_labels",
    "check_finite",
    "to_numpy_images",
]


def check_finite(arr, name="array"):
    """Raise ValueError if *arr* contains NaN or infinity."""
    if isinstance(arr, torch.Tensor):
        ok = bool(torch.isfinite(arr).all())
    else:
        ok = bool(np.isfinite(arr).all())
    if not ok:
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_image_batch(X, *, clip_tol=1e-6, require_range=True) -> torch.Tensor:
    """Coerce an image batch to a float32 NCHW tensor in [0, 1].

    Accepts numpy (N, H, W, C) / (H, W, C) or torch (N, C, H, W) / (C, H, W).
    Values outside [0, 1] by more than *clip_tol* raise; tiny float residue
    is clamped silently.
    """
    if isinstance(X, np.ndarray):
        arr = np.asarray(X, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise ValueError(f"expected 3-d or 4-d image array, got shape {X.shape}")
        t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    elif isinstance(X, torch.Tensor):
        t = X.float()
        if t.ndim == 3:
            t = t.unsqueeze(0)
        if t.ndim != 4:
            raise ValueError(f"expected 3-d or 4-d image tensor, got shape {tuple(X.shape)}")
    else:
        raise TypeError(f"unsupported image batch type: {type(X).__name__}")
    check_finite(t, "image batch")
    if require_range:
        lo, hi = float(t.min()), float(t.max())
        if lo < -clip_tol or hi > 1.0 + clip_tol:
            raise ValueError(f"pixel values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
        t = t.clamp(0.0, 1.0)
    return t


def check_labels(y, num_classes=None) -> np.ndarray:
    """Coerce labels to a 1-d int64 array, optionally range-checked."""
    if isinstance(y, torch.Tensor):
        y = y.detach().cpu().numpy()
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise ValueError("labels must be integers")
    arr = arr.astype(np.int64)
    if num_classes is not None and len(arr) > 0:
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                             f"[{arr.min()}, {arr.max()}]")
    return arr


def to_numpy_images(t: torch.Tensor) -> np.ndarray:
    """NCHW float tensor back to (N, H, W, C) float32 numpy."""
    return t.detach().cpu().permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32)
