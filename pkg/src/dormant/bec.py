"""Backdoor existence coefficient (BEC).

Backdoor-related channels are picked in the backdoored model by their
trigger-activated change (TAC). The feature maps of those channels on a set
of triggered images are compared across models with linear CKA, and the
per-layer similarity of a candidate model to the backdoored one is rescaled
so the backdoored model scores 1 and the clean model scores 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import InvalidInputError, TriggerSpec, apply_trigger
from .model import Classifier, all_feature_maps

SKIP_TOL = 1e-6
FORMULAS = {
    "tac": "mean over samples of ||m_k(x_trigger) - m_k(x)||_2 per channel",
    "cka": "linear CKA on column-centred features",
    "ratio": "(S_DA - S_CA) / (S_AA - S_CA), clamped to [0, 1]",
}


class DegenerateReportError(RuntimeError):
    """Every measured layer had a vanishing normalizer."""


@dataclass
class CKAResult:
    value: float
    degenerate: bool = False

    def __float__(self):
        return self.value


def cka(x, y) -> CKAResult:
    """Linear centred kernel alignment between two ``n x d`` feature matrices.

    Returns ``CKAResult(nan, degenerate=True)`` when either centred matrix is
    identically zero instead of dividing by zero.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise InvalidInputError("need at least two samples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    if not np.any(x) or not np.any(y):
        return CKAResult(math.nan, degenerate=True)
    # the d x d Gram products are cheaper when d < n, the n x n ones otherwise
    if x.shape[1] + y.shape[1] <= 2 * x.shape[0]:
        num = np.linalg.norm(y.T @ x) ** 2
        den = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    else:
        kx, ky = x @ x.T, y @ y.T
        num = np.sum(kx * ky)
        den = np.linalg.norm(kx) * np.linalg.norm(ky)
    if den == 0:
        return CKAResult(math.nan, degenerate=True)
    return CKAResult(float(min(max(num / den, 0.0), 1.0)))


def tac_scores(model: Classifier, clean_x: torch.Tensor, trig: TriggerSpec) -> list[torch.Tensor]:
    """Per-layer vectors of trigger-activated change, one entry per channel."""
    if len(clean_x) == 0:
        raise InvalidInputError("empty batch")
    clean_maps = all_feature_maps(model, clean_x)
    trig_maps = all_feature_maps(model, apply_trigger(clean_x, trig))
    return [(t - c).flatten(2).norm(dim=2).mean(dim=0) for c, t in zip(clean_maps, trig_maps)]


@dataclass
class NeuronSelection:
    indices: list[list[int]]
    scores: list[list[float]]
    fraction: float

    def to_dict(self):
        return asdict(self)


def select_backdoor_neurons(tac: list[torch.Tensor], fraction: float = 0.10) -> NeuronSelection:
    """Top ``ceil(fraction * c_l)`` channels per layer, ties broken by lower index."""
    if not 0 < fraction <= 1:
        raise InvalidInputError("fraction must lie in (0, 1]")
    indices, scores = [], []
    for layer in tac:
        vals = np.asarray(layer, dtype=np.float64)
        k = math.ceil(fraction * len(vals))
        order = np.lexsort((np.arange(len(vals)), -vals))[:k]
        indices.append([int(i) for i in order])
        scores.append([float(vals[i]) for i in order])
    return NeuronSelection(indices, scores, fraction)


@dataclass
class LayerSimilarity:
    layer: int
    s_da: float | None
    s_ca: float | None
    s_aa: float | None
    ratio: float | None
    skipped: str | None = None


@dataclass
class BECReport:
    value: float
    layers: list[LayerSimilarity]
    n_samples: int
    dataset: str = "attacker-poison"
    formulas: dict = field(default_factory=lambda: dict(FORMULAS))

    @property
    def skipped(self):
        return [l.layer for l in self.layers if l.skipped]

    def to_dict(self):
        return {
            "bec": self.value,
            "n_samples": self.n_samples,
            "dataset": self.dataset,
            "skipped_layers": self.skipped,
            "layers": [asdict(l) for l in self.layers],
            "formulas": self.formulas,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d: dict) -> "BECReport":
        layers = [LayerSimilarity(**l) for l in d["layers"]]
        return cls(d["bec"], layers, d["n_samples"], d["dataset"], d["formulas"])


def _selected(maps, idx):
    return maps[:, idx].flatten(1).numpy()


def bec(defended: Classifier, backdoored: Classifier, clean: Classifier, x_poisoned: torch.Tensor,
        selection: NeuronSelection, dataset="attacker-poison") -> BECReport:
    """Backdoor existence coefficient of ``defended`` relative to the backdoored/clean pair.

    ``x_poisoned`` holds triggered images; ``selection`` comes from
    :func:`select_backdoor_neurons` on the backdoored model.
    """
    archs = {json.dumps(m.architecture()) for m in (defended, backdoored, clean)}
    if len(archs) != 1:
        raise InvalidInputError("models must share one architecture")
    maps_d = all_feature_maps(defended, x_poisoned)
    maps_a = all_feature_maps(backdoored, x_poisoned)
    maps_c = all_feature_maps(clean, x_poisoned)
    layers, ratios = [], []
    for l, idx in enumerate(selection.indices):
        a = _selected(maps_a[l], idx)
        s_da = cka(_selected(maps_d[l], idx), a)
        s_ca = cka(_selected(maps_c[l], idx), a)
        s_aa = cka(a, a)
        if s_da.degenerate or s_ca.degenerate or s_aa.degenerate:
            vals = [None if r.degenerate else r.value for r in (s_da, s_ca, s_aa)]
            layers.append(LayerSimilarity(l, *vals, None, "degenerate features"))
            continue
        denom = s_aa.value - s_ca.value
        if abs(denom) < SKIP_TOL:
            layers.append(LayerSimilarity(l, s_da.value, s_ca.value, s_aa.value, None, "degenerate denominator"))
            continue
        ratio = min(max((s_da.value - s_ca.value) / denom, 0.0), 1.0)
        ratios.append(ratio)
        layers.append(LayerSimilarity(l, s_da.value, s_ca.value, s_aa.value, ratio))
    if not ratios:
        raise DegenerateReportError("every layer was skipped")
    return BECReport(float(np.mean(ratios)), layers, len(x_poisoned), dataset)
