"""Layered CNN classifier, training loop, evaluation and checkpoints."""

from __future__ import annotations

import copy
import io
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .data import ImageDataset, InvalidInputError, TriggerSpec, apply_trigger

log = logging.getLogger(__name__)

ROLES = ("clean", "backdoored", "defended")
CHECKPOINT_FORMAT = "dormant-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, epoch, message="loss became non-finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 0.02
    batch_size: int = 64
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.lr <= 0:
            raise InvalidInputError("learning rate must be positive")
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be >= 1")


class Classifier(nn.Module):
    """Stack of conv-BN-ReLU blocks followed by global pooling and a linear head.

    ``feature_maps`` exposes the post-ReLU output of every block; these are the
    layers measured by the backdoor-existence analysis.
    """

    def __init__(self, in_shape=(3, 32, 32), num_classes=10, widths=(16, 32, 64, 128), role="clean"):
        super().__init__()
        if role not in ROLES:
            raise InvalidInputError(f"unknown role {role!r}")
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self._role = role
        self.provenance: dict = {}
        blocks = []
        c = in_shape[0]
        for w in widths:
            blocks.append(nn.Sequential(nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU()))
            c = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(c, num_classes)
        self.eval()

    @property
    def role(self):
        return self._role

    @property
    def num_layers(self):
        return len(self.blocks)

    def layer_shapes(self):
        _, h, w = self.in_shape
        shapes = []
        for i, c in enumerate(self.widths):
            shapes.append((c, h, w))
            if i < len(self.widths) - 1:
                h, w = h // 2, w // 2
        return shapes

    def _trunk(self, x, keep=False):
        maps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if keep:
                maps.append(x)
            if i < len(self.blocks) - 1:
                x = F.max_pool2d(x, 2)
        return x, maps

    def forward(self, x):
        x, _ = self._trunk(x)
        return self.head(x.mean(dim=(2, 3)))

    def forward_with_features(self, x):
        z, maps = self._trunk(x, keep=True)
        return self.head(z.mean(dim=(2, 3))), maps

    def clone(self, role=None) -> "Classifier":
        other = copy.deepcopy(self)
        if role is not None:
            if role not in ROLES:
                raise InvalidInputError(f"unknown role {role!r}")
            other._role = role
        return other

    def architecture(self) -> dict:
        return {"in_shape": list(self.in_shape), "num_classes": self.num_classes, "widths": list(self.widths)}


def _batches(x, batch_size):
    for i in range(0, len(x), batch_size):
        yield x[i:i + batch_size]


@torch.no_grad()
def logits(model: Classifier, batch: torch.Tensor, batch_size=1000) -> torch.Tensor:
    model.eval()
    return torch.cat([model(b) for b in _batches(batch, batch_size)])


@torch.no_grad()
def feature_maps(model: Classifier, batch: torch.Tensor, layer: int, batch_size=1000) -> torch.Tensor:
    if not 0 <= layer < model.num_layers:
        raise InvalidInputError(f"layer {layer} outside [0, {model.num_layers})")
    model.eval()
    out = []
    for b in _batches(batch, batch_size):
        _, maps = model.forward_with_features(b)
        out.append(maps[layer])
    return torch.cat(out)


@torch.no_grad()
def all_feature_maps(model: Classifier, batch: torch.Tensor, batch_size=1000) -> list[torch.Tensor]:
    model.eval()
    per_layer = [[] for _ in range(model.num_layers)]
    for b in _batches(batch, batch_size):
        _, maps = model.forward_with_features(b)
        for acc, m in zip(per_layer, maps):
            acc.append(m)
    return [torch.cat(a) for a in per_layer]


def predict(model: Classifier, batch: torch.Tensor) -> torch.Tensor:
    return logits(model, batch).argmax(dim=1)


def evaluate_acc(model: Classifier, ds: ImageDataset) -> float:
    return (predict(model, ds.images) == ds.labels).float().mean().item()


def asr_mask(ds: ImageDataset, target: int) -> torch.Tensor:
    """Samples counted by ASR: those whose true label is not the target."""
    keep = ds.labels != target
    if not keep.any():
        raise InvalidInputError("every test sample belongs to the target class")
    return keep


def evaluate_asr(model: Classifier, ds: ImageDataset, trig: TriggerSpec, delta: torch.Tensor | None = None) -> float:
    """Fraction of non-target test samples sent to the target class once triggered (and perturbed)."""
    x = ds.images[asr_mask(ds, trig.target)]
    return (predict(model, apply_trigger(x, trig, delta)) == trig.target).float().mean().item()


def fit(model: Classifier, ds: ImageDataset, cfg: TrainConfig, transform=None, params=None,
        freeze_bn=False) -> Classifier:
    """Train ``model`` in place with SGD + momentum and a cosine schedule.

    ``transform(model, x, y, generator) -> (x, y)`` may rewrite each minibatch
    (e.g. adversarial augmentation). ``params`` restricts the optimized parameters.
    ``freeze_bn`` keeps batch-norm running statistics fixed (small-data fine-tuning).
    """
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(
        params if params is not None else model.parameters(),
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    steps = cfg.epochs * math.ceil(len(ds) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(ds), generator=g)
        total = 0.0
        for i in range(0, len(ds), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x, y = ds.images[idx], ds.labels[idx]
            if transform is not None:
                x, y = transform(model, x, y, g)
            model.train()
            if freeze_bn:
                for m in model.modules():
                    if isinstance(m, nn.BatchNorm2d):
                        m.eval()
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                model.eval()
                raise TrainingError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        log.debug("epoch %d loss %.4f", epoch, total / len(ds))
    model.eval()
    return model


def train(ds: ImageDataset, cfg: TrainConfig, widths=(16, 32, 64, 128), role=None) -> Classifier:
    """Train a fresh classifier; the role is ``backdoored`` when ``ds`` carries poisoned samples."""
    if role is None:
        role = "backdoored" if bool(ds.poison_flags.any()) else "clean"
    torch.manual_seed(cfg.seed)
    model = Classifier(ds.image_shape, ds.num_classes, widths, role=role)
    fit(model, ds, cfg)
    model.provenance = {"train_config": asdict(cfg), "train_size": len(ds)}
    return model


def save_checkpoint(model: Classifier, path, extra: dict | None = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture(),
        "role": model.role,
        "provenance": model.provenance,
        "state": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> Classifier:
    payload = torch.load(Path(path), weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path} is not a model checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {payload['version']}")
    arch = payload["architecture"]
    model = Classifier(tuple(arch["in_shape"]), arch["num_classes"], tuple(arch["widths"]), role=payload["role"])
    model.load_state_dict(payload["state"])
    model.provenance = payload["provenance"]
    model.eval()
    return model
