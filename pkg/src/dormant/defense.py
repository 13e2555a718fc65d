"""Post-training defenses run by a defender holding a small clean dataset.

Three desk-scale methods of increasing disruption:

``finetune``
    plain fine-tuning of every parameter on clean data;
``reinit-head-finetune``
    re-initialize the classification head, then fine-tune everything;
``adversarial-finetune``
    fine-tune on clean data plus copies shifted by a per-batch universal
    perturbation found with PGD (unlearning shared adversarial directions).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .data import ImageDataset, InvalidInputError, subset_indices
from .model import Classifier, TrainConfig, fit

METHODS = ("finetune", "reinit-head-finetune", "adversarial-finetune")


@dataclass
class DefenseConfig:
    method: str = "finetune"
    clean_fraction: float = 0.05
    epochs: int = 20
    lr: float = 0.03
    batch_size: int = 32
    weight_decay: float = 5e-2
    adv_eps: float = 0.01
    adv_steps: int = 5
    freeze_bn: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown defense {self.method!r}; choose from {METHODS}")
        if not 0 < self.clean_fraction <= 1:
            raise InvalidInputError("clean fraction must lie in (0, 1]")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")

    @property
    def label(self):
        return self.method if self.seed == 0 else f"{self.method}@{self.seed}"


def clean_subset(train: ImageDataset, fraction: float, seed: int = 0) -> tuple[ImageDataset, torch.Tensor]:
    """Seeded ``floor(fraction * n)`` clean samples for the defender."""
    idx = subset_indices(len(train), fraction, seed)
    return train.subset(idx, "defense-clean"), idx


def index_hash(idx: torch.Tensor) -> str:
    return hashlib.sha256(idx.numpy().tobytes()).hexdigest()[:16]


def _universal_pgd_augment(eps, steps):
    """Minibatch transform appending images shifted by one shared loss-maximizing perturbation."""

    def transform(model, x, y, gen):
        model.eval()
        delta = (torch.rand(x.shape[1:], generator=gen) * 2 - 1) * eps
        alpha = 2.5 * eps / steps
        for _ in range(steps):
            delta.requires_grad_(True)
            loss = F.cross_entropy(model((x + delta).clamp(0, 1)), y)
            grad, = torch.autograd.grad(loss, delta)
            delta = (delta.detach() + alpha * grad.sign()).clamp(-eps, eps)
        return torch.cat([x, (x + delta).clamp(0, 1)]), torch.cat([y, y])

    return transform


def _reinit_head(model: Classifier, seed: int):
    g = torch.Generator().manual_seed(seed + 7919)
    old_w, old_b = model.head.weight.detach().clone(), model.head.bias.detach().clone()
    bound = 1 / math.sqrt(model.head.in_features)
    with torch.no_grad():
        while True:
            model.head.weight.uniform_(-bound, bound, generator=g)
            model.head.bias.uniform_(-bound, bound, generator=g)
            if (model.head.weight != old_w).all() and (model.head.bias != old_b).all():
                break


def defend(backdoored: Classifier, clean: ImageDataset, cfg: DefenseConfig) -> Classifier:
    """Return a defended copy of ``backdoored``; the input model is left untouched."""
    if backdoored.role != "backdoored":
        raise InvalidInputError(f"defend expects a backdoored model, got role={backdoored.role!r}")
    model = backdoored.clone(role="defended")
    torch.manual_seed(cfg.seed)
    train_cfg = TrainConfig(cfg.epochs, cfg.lr, cfg.batch_size, cfg.weight_decay, seed=cfg.seed)
    if cfg.method == "reinit-head-finetune":
        _reinit_head(model, cfg.seed)
    transform = _universal_pgd_augment(cfg.adv_eps, cfg.adv_steps) if cfg.method == "adversarial-finetune" else None
    fit(model, clean, train_cfg, transform=transform, freeze_bn=cfg.freeze_bn)
    model.provenance = {**backdoored.provenance, "defense": asdict(cfg)}
    return model

