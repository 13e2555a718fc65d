"""Datasets, backdoor triggers and poisoning.

Images are float32 tensors in ``[0, 1]`` laid out as ``(n, c, h, w)``.
Labels are 0-based class indices.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

SPLITS = ("train", "test", "defense-clean", "attacker-poison")


class InvalidInputError(ValueError):
    """Raised for tensors or configurations that violate a contract."""


@dataclass
class ImageDataset:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    split: str = "train"
    poison_flags: torch.Tensor | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise InvalidInputError(f"expected non-empty (n, c, h, w) images, got {tuple(self.images.shape)}")
        if self.labels.shape != (len(self.images),):
            raise InvalidInputError("labels must be a vector with one entry per image")
        if self.split not in SPLITS:
            raise InvalidInputError(f"unknown split {self.split!r}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise InvalidInputError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")
        if self.poison_flags is None:
            self.poison_flags = torch.zeros(len(self.images), dtype=torch.bool)

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices, split=None) -> "ImageDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        if len(idx) == 0:
            raise InvalidInputError("empty selection")
        return ImageDataset(
            self.images[idx],
            self.labels[idx],
            self.num_classes,
            split or self.split,
            self.poison_flags[idx],
        )

    def save(self, directory, seed=None, trigger: "TriggerSpec | None" = None):
        """Write raw tensors plus a JSON index into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "images.npy", self.images.numpy())
        np.save(directory / "labels.npy", self.labels.numpy())
        index = {
            "format": "dormant-dataset/1",
            "images": "images.npy",
            "labels": "labels.npy",
            "num_classes": self.num_classes,
            "split": self.split,
            "poison_flags": self.poison_flags.nonzero().flatten().tolist(),
            "seed": seed,
            "trigger": trigger.to_dict() if trigger is not None else None,
        }
        (directory / "index.json").write_text(json.dumps(index, indent=2))

    @classmethod
    def load(cls, directory) -> "ImageDataset":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        images = torch.from_numpy(np.load(directory / index["images"]))
        labels = torch.from_numpy(np.load(directory / index["labels"]))
        flags = torch.zeros(len(images), dtype=torch.bool)
        flags[index["poison_flags"]] = True
        return cls(images, labels, index["num_classes"], index["split"], flags)


def _encode(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().numpy().astype(np.float32)
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(d: dict) -> torch.Tensor:
    raw = base64.b64decode(d["data"])
    return torch.from_numpy(np.frombuffer(raw, dtype=np.float32).reshape(d["shape"]).copy())


@dataclass
class TriggerSpec:
    """A patch (BadNets-style) or blended trigger with its target class."""

    kind: str
    pattern: torch.Tensor
    mask: torch.Tensor
    target: int
    alpha: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("patch", "blend"):
            raise InvalidInputError(f"unknown trigger kind {self.kind!r}")
        if self.pattern.ndim != 3 or self.mask.shape != self.pattern.shape[1:]:
            raise InvalidInputError("pattern must be (c, h, w) and mask (h, w)")
        if self.pattern.min() < 0 or self.pattern.max() > 1:
            raise InvalidInputError("trigger pattern must lie in [0, 1]")
        if not torch.all((self.mask == 0) | (self.mask == 1)):
            raise InvalidInputError("mask must be binary")
        if self.kind == "patch" and self.mask.sum() == 0:
            raise InvalidInputError("patch mask is empty")
        if self.kind == "blend" and not 0 < self.alpha <= 1:
            raise InvalidInputError("blend alpha must lie in (0, 1]")
        if self.target < 0:
            raise InvalidInputError("target label must be non-negative")
        self.pattern = self.pattern.float()
        self.mask = self.mask.float()
        if not self.name:
            self.name = "badnets" if self.kind == "patch" else "blended"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "target": self.target,
            "alpha": self.alpha,
            "pattern": _encode(self.pattern),
            "mask": _encode(self.mask),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(d["kind"], _decode(d["pattern"]), _decode(d["mask"]), d["target"], d["alpha"], d.get("name", ""))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TriggerSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def patch_trigger(shape=(3, 32, 32), size=3, target=0) -> TriggerSpec:
    """Checkerboard square in the bottom-right corner."""
    c, h, w = shape
    pattern = torch.zeros(shape)
    mask = torch.zeros(h, w)
    ii, jj = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
    checker = ((ii + jj) % 2 == 0).float()
    pattern[:, h - size:, w - size:] = checker
    mask[h - size:, w - size:] = 1
    return TriggerSpec("patch", pattern, mask, target, name="badnets")


def blend_trigger(shape=(3, 32, 32), alpha=0.2, target=0, seed=0) -> TriggerSpec:
    """Full-image uniform-noise pattern blended with weight ``alpha``."""
    g = torch.Generator().manual_seed(seed)
    pattern = torch.rand(shape, generator=g)
    return TriggerSpec("blend", pattern, torch.ones(shape[1:]), target, alpha=alpha, name="blended")


def make_trigger(name: str, shape=(3, 32, 32), target=0, seed=0, **kw) -> TriggerSpec:
    if name == "badnets":
        return patch_trigger(shape, target=target, **kw)
    if name == "blended":
        return blend_trigger(shape, target=target, seed=seed, **kw)
    raise InvalidInputError(f"unknown trigger {name!r}")


def apply_trigger(x: torch.Tensor, trig: TriggerSpec, delta: torch.Tensor | None = None) -> torch.Tensor:
    """Insert the trigger into ``x`` (single image or batch), add ``delta``, clip to [0, 1]."""
    if x.shape[-3:] != trig.pattern.shape:
        raise InvalidInputError(f"image shape {tuple(x.shape[-3:])} does not match trigger {tuple(trig.pattern.shape)}")
    if delta is not None and delta.shape[-3:] != trig.pattern.shape:
        raise InvalidInputError(f"perturbation shape {tuple(delta.shape)} does not match image")
    if trig.kind == "patch":
        out = (1 - trig.mask) * x + trig.mask * trig.pattern
    else:
        out = (1 - trig.alpha) * x + trig.alpha * trig.pattern
    if delta is not None:
        out = out + delta
    return out.clamp(0, 1)


@dataclass
class PoisonConfig:
    ratio: float = 0.10
    target: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise InvalidInputError("poison ratio must lie in (0, 1]")
        if self.target < 0:
            raise InvalidInputError("target label must be non-negative")


def poison_dataset(ds: ImageDataset, trig: TriggerSpec, cfg: PoisonConfig) -> tuple[ImageDataset, torch.Tensor]:
    """Trigger and relabel exactly ``floor(ratio * n)`` seeded-random samples.

    Returns the poisoned copy and the sorted index set of poisoned samples.
    """
    count = math.floor(cfg.ratio * len(ds))
    if count < 1:
        raise InvalidInputError(f"ratio {cfg.ratio} poisons no sample out of {len(ds)}")
    if cfg.target >= ds.num_classes:
        raise InvalidInputError("target label outside the label set")
    g = torch.Generator().manual_seed(cfg.seed)
    idx = torch.randperm(len(ds), generator=g)[:count].sort().values
    images = ds.images.clone()
    labels = ds.labels.clone()
    flags = ds.poison_flags.clone()
    images[idx] = apply_trigger(images[idx], trig)
    labels[idx] = cfg.target
    flags[idx] = True
    return ImageDataset(images, labels, ds.num_classes, ds.split, flags), idx


def subset_indices(n: int, fraction: float, seed=0) -> torch.Tensor:
    """Sorted seeded choice of ``floor(fraction * n)`` indices out of ``n``."""
    if not 0 < fraction <= 1:
        raise InvalidInputError("fraction must lie in (0, 1]")
    count = math.floor(fraction * n)
    if count < 1:
        raise InvalidInputError("selection would be empty")
    if count == n:
        return torch.arange(n)
    g = torch.Generator().manual_seed(seed)
    return torch.randperm(n, generator=g)[:count].sort().values


def attacker_subset(ds: ImageDataset, fraction: float, seed=0, split="attacker-poison") -> ImageDataset:
    """Seeded subsample of ``fraction * len(ds)`` samples from a pool of poisoned images."""
    return ds.subset(subset_indices(len(ds), fraction, seed), split)


def poisoned_pool(ds: ImageDataset, trig: TriggerSpec, split="attacker-poison") -> ImageDataset:
    """Every sample of ``ds`` triggered and relabeled to the target class."""
    return ImageDataset(
        apply_trigger(ds.images, trig),
        torch.full((len(ds),), trig.target, dtype=torch.long),
        ds.num_classes,
        split,
        torch.ones(len(ds), dtype=torch.bool),
    )


# -- synthetic desk-scale data -------------------------------------------------

SHAPES = ("square", "disk", "triangle", "ring", "plus", "cross", "hbar", "vbar", "diamond", "frame")


def _shape_mask(kind, dy, dx, r):
    ady, adx = np.abs(dy), np.abs(dx)
    d = np.sqrt(dy**2 + dx**2)
    if kind == "disk":
        return d < r
    if kind == "square":
        return np.maximum(ady, adx) < 0.8 * r
    if kind == "triangle":
        return (dy > -r) & (dy < r) & (adx < (dy + r) / 2)
    if kind == "ring":
        return (d < r) & (d > 0.55 * r)
    if kind == "plus":
        return ((ady < 0.3 * r) & (adx < r)) | ((adx < 0.3 * r) & (ady < r))
    if kind == "cross":
        return (np.abs(ady - adx) < 0.35 * r) & (np.maximum(ady, adx) < r)
    if kind == "hbar":
        return (ady < 0.35 * r) & (adx < r)
    if kind == "vbar":
        return (adx < 0.35 * r) & (ady < r)
    if kind == "diamond":
        return ady + adx < r
    if kind == "frame":
        m = np.maximum(ady, adx)
        return (m < r) & (m > 0.55 * r)
    raise KeyError(kind)


@dataclass
class SyntheticSpec:
    """Seeded colored-shape classification task (one shape per class)."""

    n_train: int = 5000
    n_test: int = 1000
    size: int = 32
    num_classes: int = 10
    min_contrast: float = 0.2
    texture: float = 0.0
    seed: int = 0


def render_shapes(n, size=32, num_classes=10, min_contrast=0.2, texture=0.0, seed=0) -> tuple[torch.Tensor, torch.Tensor]:
    if num_classes > len(SHAPES):
        raise InvalidInputError(f"at most {len(SHAPES)} synthetic classes")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    labels = rng.integers(0, num_classes, n)
    images = np.empty((n, 3, size, size), np.float32)
    for i in range(n):
        r = rng.uniform(0.18, 0.3) * size
        cy, cx = rng.uniform(r, size - r, 2)
        mask = _shape_mask(SHAPES[labels[i]], yy - cy, xx - cx, r)
        # smooth two-colour background gradient
        c0, c1 = rng.uniform(0, 1, (2, 3, 1, 1))
        theta = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(theta) * xx + np.sin(theta) * yy) / size
        ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-8)
        bg = c0 + (c1 - c0) * ramp
        fg = rng.uniform(0, 1, (3, 1, 1))
        # keep the shape at least min_contrast away from the mean background
        shift = fg - bg.mean(axis=(1, 2), keepdims=True)
        norm = np.abs(shift).max()
        if norm < min_contrast:
            fg = np.clip(bg.mean(axis=(1, 2), keepdims=True) + shift / (norm + 1e-8) * min_contrast, 0, 1)
        img = np.where(mask, fg, bg)
        if texture > 0:
            img = img + rng.normal(0, rng.uniform(0, texture), img.shape)
        images[i] = img
    return torch.from_numpy(images.clip(0, 1)), torch.from_numpy(labels.astype(np.int64))


def synthetic_splits(spec: SyntheticSpec | None = None) -> tuple[ImageDataset, ImageDataset]:
    """Train/test splits of the synthetic shape task, deterministic in ``spec.seed``."""
    spec = spec or SyntheticSpec()
    n = spec.n_train + spec.n_test
    x, y = render_shapes(n, spec.size, spec.num_classes, spec.min_contrast, spec.texture, spec.seed)
    train = ImageDataset(x[: spec.n_train], y[: spec.n_train], spec.num_classes, "train")
    test = ImageDataset(x[spec.n_train:], y[spec.n_train:], spec.num_classes, "test")
    return train, test
