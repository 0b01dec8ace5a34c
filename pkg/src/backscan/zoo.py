"""Model zoo and dataset provisioning.

Everything here is desk scale: a generated 10-class shapes dataset, three
small CNN families (plain, residual, depthwise-separable, each well under
500k parameters), and a conv autoencoder whose encoder doubles as the
feature projector for pervasive triggers and feature-space regulation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .core import ACCURACY_FLOOR, ClassifierHandle, ImageSet, ModelBundle
from .triggers import register_encoder_pair

__all__ = [
    "TrainingFailure",
    "IngestionError",
    "TrainConfig",
    "DatasetSplits",
    "EncoderPair",
    "ARCHITECTURES",
    "build_architecture",
    "provision_dataset",
    "ingest_directory",
    "train_classifier",
    "train_autoencoder",
    "save_model",
    "load_model",
    "save_encoder_pair",
    "load_encoder_pair",
]


class TrainingFailure(RuntimeError):
    """Training finished but missed its quality target; diagnostics attached."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IngestionError(ValueError):
    """A dataset directory is malformed."""


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class DatasetSplits:
    name: str
    train: ImageSet
    val: ImageSet
    test: ImageSet
    num_classes: int

    @property
    def image_shape(self):
        return self.train.image_shape


def _shape_stencil(cls_id, size, rng, supersample=1, radius_range=(6, 10),
                   jitter=4):
    """Stencil of one of the ten shape classes, rendered at supersample
    resolution and averaged down for soft edges. Returns floats in [0, 1]."""
    ss = supersample
    yy, xx = np.mgrid[0:size * ss, 0:size * ss].astype(np.float32)
    cy = (size / 2 + rng.uniform(-jitter, jitter)) * ss
    cx = (size / 2 + rng.uniform(-jitter, jitter)) * ss
    r = rng.uniform(*radius_range) * ss
    dy, dx = yy - cy, xx - cx
    if cls_id == 0:      # disk
        hit = dy ** 2 + dx ** 2 <= r ** 2
    elif cls_id == 1:    # filled square
        hit = (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    elif cls_id == 2:    # triangle
        hit = (dy >= -r * 0.8) & (dy <= r * 0.8) & (np.abs(dx) <= (dy + r * 0.8) / 2)
    elif cls_id == 3:    # plus
        hit = ((np.abs(dx) <= r / 3) & (np.abs(dy) <= r)) | \
              ((np.abs(dy) <= r / 3) & (np.abs(dx) <= r))
    elif cls_id == 4:    # ring
        d2 = dy ** 2 + dx ** 2
        hit = (d2 <= r ** 2) & (d2 >= (r * 0.55) ** 2)
    elif cls_id == 5:    # horizontal bars
        hit = (np.abs(dy) <= r) & (np.abs(dx) <= r) & (np.floor(yy / (3 * ss)) % 2 == 0)
    elif cls_id == 6:    # vertical bars
        hit = (np.abs(dy) <= r) & (np.abs(dx) <= r) & (np.floor(xx / (3 * ss)) % 2 == 0)
    elif cls_id == 7:    # diamond
        hit = np.abs(dy) + np.abs(dx) <= r
    elif cls_id == 8:    # checkerboard
        hit = (np.abs(dy) <= r) & (np.abs(dx) <= r) & \
              ((np.floor(yy / (4 * ss)) + np.floor(xx / (4 * ss))) % 2 == 0)
    elif cls_id == 9:    # diagonal cross
        hit = (np.abs(dy - dx) <= r / 3) | (np.abs(dy + dx) <= r / 3)
    else:
        raise ValueError(f"unknown shape class {cls_id}")
    hit = hit.astype(np.float32)
    if ss > 1:
        hit = hit.reshape(size, ss, size, ss).mean(axis=(1, 3))
    # soft edges: band-limit the stencil like a camera would
    from scipy.ndimage import gaussian_filter
    return gaussian_filter(hit, sigma=0.6)


def _render_shapes(count_per_class, num_classes, size, rng):
    """Class = the dominant central shape; backgrounds carry small distractor
    shapes of random classes, the clutter natural data would have."""
    images = np.empty((count_per_class * num_classes, size, size, 3), dtype=np.float32)
    labels = np.empty(count_per_class * num_classes, dtype=np.int64)
    patch = size // 2
    i = 0
    for cls in range(num_classes):
        for _ in range(count_per_class):
            bg = rng.uniform(0.0, 0.45, size=3).astype(np.float32)
            fg = rng.uniform(0.55, 1.0, size=3).astype(np.float32)
            if rng.random() < 0.5:
                bg, fg = fg, bg
            img = np.broadcast_to(bg, (size, size, 3)).copy()
            for _ in range(rng.integers(0, 3)):
                dcls = int(rng.integers(num_classes))
                dst = _shape_stencil(dcls, patch, rng, supersample=2,
                                     radius_range=(2.5, 4.0), jitter=2)[..., None]
                dcol = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
                top = rng.integers(0, size - patch)
                left = rng.integers(0, size - patch)
                region = img[top:top + patch, left:left + patch]
                region[:] = region * (1.0 - dst) + dcol * dst
            stencil = _shape_stencil(cls, size, rng, supersample=2,
                                     jitter=7)[..., None]
            img = img * (1.0 - stencil) + fg * stencil
            img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = cls
            i += 1
    return images, labels


def _split_balanced(images, labels, counts, num_classes, rng):
    """Per-class shuffled split into len(counts) parts with counts per class."""
    parts = [([], []) for _ in counts]
    for cls in range(num_classes):
        idx = np.nonzero(labels == cls)[0]
        rng.shuffle(idx)
        start = 0
        for part, n in zip(parts, counts):
            sel = idx[start:start + n]
            part[0].append(images[sel])
            part[1].append(labels[sel])
            start += n
    sets = []
    for imgs, labs in parts:
        x = np.concatenate(imgs)
        y = np.concatenate(labs)
        order = rng.permutation(len(x))
        sets.append(ImageSet(x[order], y[order]))
    return sets


def provision_dataset(dataset_id: str, seed: int = 0) -> DatasetSplits:
    """Deterministic train/val/test splits for a dataset id or directory.

    ``synthetic-shapes-10`` generates 5000/500/1000 balanced 32×32 images;
    any other id is treated as a directory of one PNG subfolder per class.
    """
    if dataset_id == "synthetic-shapes-10":
        rng = np.random.default_rng(np.random.PCG64(seed))
        images, labels = _render_shapes(650, 10, 32, rng)
        train, val, test = _split_balanced(images, labels, (500, 50, 100), 10, rng)
        return DatasetSplits("synthetic-shapes-10", train, val, test, 10)
    return ingest_directory(dataset_id, seed=seed)


def ingest_directory(root, seed: int = 0, fractions=(0.7, 0.1, 0.2)) -> DatasetSplits:
    """Load a directory with one subfolder of PNGs per class."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root is not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class folders found under {root}")
    images, labels = [], []
    for cls, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.png"))
        if not files:
            raise IngestionError(f"class folder has no PNG files: {cdir}")
        for f in files:
            arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
            images.append(arr)
            labels.append(cls)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise IngestionError(f"images under {root} have mixed shapes: {sorted(shapes)}")
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(np.random.PCG64(seed))
    per_class = min(np.bincount(labels))
    counts = [max(1, int(per_class * f)) for f in fractions]
    counts[0] = per_class - counts[1] - counts[2]
    train, val, test = _split_balanced(images, labels, counts, len(class_dirs), rng)
    return DatasetSplits(str(root), train, val, test, len(class_dirs))


# ---------------------------------------------------------------------------
# Architectures


class _Residual(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip_conv = nn.Conv2d(cin, cout, 1, stride=stride)
        self.skip_bn = nn.BatchNorm2d(cout)
        self.act = nn.ReLU()

    def forward(self, x):
        h = self.act(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.act(h + self.skip_bn(self.skip_conv(x)))


def _plain_conv(num_classes):
    return nn.Sequential(
        nn.Conv2d(3, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(32, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(64, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(64, num_classes))


def _residual_net(num_classes):
    return nn.Sequential(
        nn.Conv2d(3, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(),
        _Residual(16, 32, 2), _Residual(32, 64, 2),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(64, num_classes))


def _dw_separable(num_classes):
    def block(cin, cout, stride):
        return nn.Sequential(
            nn.Conv2d(cin, cin, 3, stride=stride, padding=1, groups=cin),
            nn.BatchNorm2d(cin), nn.ReLU(),
            nn.Conv2d(cin, cout, 1), nn.BatchNorm2d(cout), nn.ReLU())
    return nn.Sequential(
        nn.Conv2d(3, 48, 3, padding=1), nn.BatchNorm2d(48), nn.ReLU(),
        block(48, 96, 2), block(96, 128, 2),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(128, num_classes))


ARCHITECTURES = {
    "plainconv": _plain_conv,
    "residual": _residual_net,
    "dwsep": _dw_separable,
}


def build_architecture(architecture: str, num_classes: int) -> nn.Module:
    try:
        factory = ARCHITECTURES[architecture]
    except KeyError:
        raise KeyError(f"unknown architecture {architecture!r}; "
                       f"registry has {sorted(ARCHITECTURES)}") from None
    return factory(num_classes)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    """All learning-procedure factors are explicit knobs."""

    batch_size: int = 128
    epochs: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"             # adam | sgd
    scheduler: str = "cosine"           # none | cosine | step

    def to_dict(self):
        return asdict(self)


def _make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate,
                                weight_decay=config.weight_decay)
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate, momentum=0.9,
                               weight_decay=config.weight_decay)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def _make_scheduler(opt, config: TrainConfig):
    if config.scheduler == "none":
        return None
    if config.scheduler == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs, 1))
    if config.scheduler == "step":
        return torch.optim.lr_scheduler.StepLR(opt, step_size=max(config.epochs // 2, 1),
                                               gamma=0.1)
    raise ValueError(f"unknown scheduler {config.scheduler!r}")


def _train_loop(module, train_set: ImageSet, config: TrainConfig, seed: int,
                loss_fn, val_hook=None):
    x, y = train_set.tensors()
    opt = _make_optimizer(module.parameters(), config)
    sched = _make_scheduler(opt, config)
    order_rng = np.random.default_rng(np.random.PCG64(seed + 1))
    module.train()
    for _ in range(config.epochs):
        order = order_rng.permutation(len(x))
        for i in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[i:i + config.batch_size])
            opt.zero_grad()
            loss = loss_fn(module, x[idx], y[idx])
            loss.backward()
            opt.step()
        if sched is not None:
            sched.step()
        if val_hook is not None:
            val_hook(module)
    module.eval()


def train_classifier(architecture: str, dataset, config: Optional[TrainConfig] = None,
                     seed: int = 0, provenance: str = "clean",
                     accuracy_floor: float = ACCURACY_FLOOR,
                     dataset_seed: int = 0) -> ClassifierHandle:
    """Train one zoo classifier; raises TrainingFailure below the accuracy floor.

    *dataset* is a DatasetSplits or a dataset id (provisioned with
    ``dataset_seed``). Two calls with identical arguments produce identical
    weights and accuracy.
    """
    if isinstance(dataset, str):
        dataset = provision_dataset(dataset, seed=dataset_seed)
    config = config or TrainConfig()
    torch.manual_seed(seed)
    module = build_architecture(architecture, dataset.num_classes)
    ce = nn.CrossEntropyLoss()
    _train_loop(module, dataset.train, config, seed,
                lambda m, xb, yb: ce(m(xb), yb))
    meta = ModelBundle(architecture=architecture, dataset=dataset.name, accuracy=0.0,
                       seed=seed, provenance=provenance, train_config=config.to_dict())
    handle = ClassifierHandle(module, dataset.num_classes, meta)
    acc = float(np.mean(handle.predict(dataset.test.images) == dataset.test.labels))
    meta.accuracy = acc
    if acc < accuracy_floor:
        raise TrainingFailure(
            f"accuracy {acc:.4f} below floor {accuracy_floor:.2f} for "
            f"{architecture} on {dataset.name}",
            diagnostics={"accuracy": acc, "floor": accuracy_floor,
                         "architecture": architecture, "epochs": config.epochs})
    return handle


# ---------------------------------------------------------------------------
# Autoencoder


class _Encoder(nn.Module):
    def __init__(self, channels=48):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, channels, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1))

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, channels=48):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, 32 * 4, 3, padding=1), nn.PixelShuffle(2), nn.ReLU(),
            nn.Conv2d(32, 16 * 4, 3, padding=1), nn.PixelShuffle(2), nn.ReLU(),
            nn.Conv2d(16, 3, 3, padding=1), nn.Sigmoid())

    def forward(self, z):
        return self.net(z)


@dataclass
class EncoderPair:
    """Autoencoder halves with a measured reconstruction budget."""

    encoder_id: str
    decoder_id: str
    encoder: nn.Module
    decoder: nn.Module
    representation_shape: tuple
    reconstruction_budget: float
    channels: int = 32
    dataset: str = ""

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def _reconstruction_rmse(pair_module, images: ImageSet) -> float:
    x, _ = images.tensors()
    with torch.no_grad():
        recon = pair_module(x)
        return float(((recon - x) ** 2).mean().sqrt())


def train_autoencoder(dataset, config: Optional[TrainConfig] = None, seed: int = 0,
                      budget_ceiling: float = 0.05, channels: int = 48,
                      encoder_id: Optional[str] = None,
                      dataset_seed: int = 0) -> EncoderPair:
    """Train the shared autoencoder; budget is pixel RMSE on the test split."""
    if isinstance(dataset, str):
        dataset = provision_dataset(dataset, seed=dataset_seed)
    config = config or TrainConfig(epochs=20, learning_rate=3e-3, scheduler="cosine")
    torch.manual_seed(seed)
    encoder = _Encoder(channels)
    decoder = _Decoder(channels)
    module = nn.Sequential(encoder, decoder)
    mse = nn.MSELoss()
    _train_loop(module, dataset.train, config, seed,
                lambda m, xb, yb: mse(m(xb), xb))
    budget = _reconstruction_rmse(module, dataset.test)
    if budget > budget_ceiling:
        raise TrainingFailure(
            f"reconstruction RMSE {budget:.4f} exceeds ceiling {budget_ceiling}",
            diagnostics={"budget": budget, "ceiling": budget_ceiling})
    h, w = dataset.image_shape[:2]
    eid = encoder_id or f"ae-{dataset.name}-s{seed}"
    for p in module.parameters():
        p.requires_grad_(False)
    pair = EncoderPair(encoder_id=eid, decoder_id=eid, encoder=encoder.eval(),
                       decoder=decoder.eval(),
                       representation_shape=(channels, h // 4, w // 4),
                       reconstruction_budget=budget, channels=channels,
                       dataset=dataset.name)
    register_encoder_pair(pair)
    return pair


# ---------------------------------------------------------------------------
# Persistence


def save_model(handle: ClassifierHandle, path) -> ModelBundle:
    """State dict to <path>.pt plus a metadata sidecar <path>.json."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(handle.module.state_dict(), path.with_suffix(".pt"))
    handle.meta.weights_path = str(path.with_suffix(".pt"))
    path.with_suffix(".json").write_text(handle.meta.to_json())
    return handle.meta


def load_model(path) -> ClassifierHandle:
    path = Path(path)
    meta = ModelBundle.from_json(path.with_suffix(".json").read_text())
    state = torch.load(path.with_suffix(".pt"), weights_only=True)
    num_classes = state[[k for k in state if k.endswith("weight")][-1]].shape[0]
    module = build_architecture(meta.architecture, num_classes)
    module.load_state_dict(state)
    return ClassifierHandle(module, num_classes, meta)


def save_encoder_pair(pair: EncoderPair, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "encoder_id": pair.encoder_id,
        "decoder_id": pair.decoder_id,
        "channels": pair.channels,
        "representation_shape": pair.representation_shape,
        "reconstruction_budget": pair.reconstruction_budget,
        "dataset": pair.dataset,
        "encoder_state": pair.encoder.state_dict(),
        "decoder_state": pair.decoder.state_dict(),
    }, path)


def load_encoder_pair(path) -> EncoderPair:
    payload = torch.load(path, weights_only=True)
    encoder = _Encoder(payload["channels"])
    decoder = _Decoder(payload["channels"])
    encoder.load_state_dict(payload["encoder_state"])
    decoder.load_state_dict(payload["decoder_state"])
    for p in encoder.parameters():
        p.requires_grad_(False)
    for p in decoder.parameters():
        p.requires_grad_(False)
    pair = EncoderPair(encoder_id=payload["encoder_id"], decoder_id=payload["decoder_id"],
                       encoder=encoder.eval(), decoder=decoder.eval(),
                       representation_shape=tuple(payload["representation_shape"]),
                       reconstruction_budget=float(payload["reconstruction_budget"]),
                       channels=payload["channels"], dataset=payload["dataset"])
    register_encoder_pair(pair)
    return pair
