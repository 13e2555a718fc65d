"""Experiment configuration: one JSON/TOML file, one master seed."""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..attack import PerturbationBudget
from ..data import InvalidInputError, PoisonConfig, SyntheticSpec
from ..defense import DefenseConfig
from ..model import TrainConfig


def derive_seed(seed: int, name: str) -> int:
    """Stable sub-seed for one stochastic step, derived from the master seed."""
    return zlib.crc32(f"{seed}:{name}".encode()) & 0x7FFFFFFF


@dataclass
class TriggerConfig:
    name: str = "blended"
    target: int = 0
    alpha: float = 0.2
    patch_size: int = 3


@dataclass
class AttackConfig:
    norm: str = "inf"
    radius: float = 0.05
    lam: float = 1.0
    fraction: float = 0.02
    steps: int = 100
    step_size: float | None = None
    iterations: int = 3000
    eps: float = 0.01
    query_budget: int = 10_000
    surrogates: int = 3

    @property
    def budget(self) -> PerturbationBudget:
        return PerturbationBudget.parse(self.norm, self.radius)


def _default_defenses():
    return [
        DefenseConfig("finetune"),
        DefenseConfig("reinit-head-finetune"),
        DefenseConfig("adversarial-finetune", lr=0.02),
    ]


@dataclass
class AblationConfig:
    defense: str = "finetune"
    bounds: dict = field(default_factory=lambda: {"inf": [0.01, 0.02, 0.05, 0.1], "2": [0.25, 0.5, 1.0, 2.0]})
    sample_counts: list = field(default_factory=lambda: [10, 25, 50, 100])
    bba_iterations: int = 3000


@dataclass
class AdaptiveConfig:
    defense: str = "finetune"
    noise_levels: list = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.03, 0.04, 0.05])


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: SyntheticSpec = field(default_factory=SyntheticSpec)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    defenses: list = field(default_factory=_default_defenses)
    wba: AttackConfig = field(default_factory=AttackConfig)
    bba: AttackConfig = field(default_factory=AttackConfig)
    ta: AttackConfig = field(default_factory=lambda: AttackConfig(norm="2", radius=1.0, fraction=0.10, steps=40))
    bec_fraction: float = 0.10
    ablation: AblationConfig = field(default_factory=AblationConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)

    def __post_init__(self):
        if self.trigger.target >= self.dataset.num_classes:
            raise InvalidInputError("target label outside the label set")
        if self.poison.target != self.trigger.target:
            raise InvalidInputError("poison target and trigger target differ")
        labels = [d.label for d in self.defenses]
        if len(set(labels)) != len(labels):
            raise InvalidInputError(f"duplicate defense labels {labels}")
        if not 0 < self.bec_fraction <= 1:
            raise InvalidInputError("bec_fraction must lie in (0, 1]")

    def to_dict(self, with_output=True) -> dict:
        d = asdict(self)
        if not with_output:
            d.pop("output_dir")
        return d

    def canonical(self) -> bytes:
        return json.dumps(self.to_dict(with_output=False), sort_keys=True, separators=(",", ":")).encode()

    def hash(self) -> str:
        return hashlib.sha256(self.canonical()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "dataset": SyntheticSpec,
            "trigger": TriggerConfig,
            "poison": PoisonConfig,
            "train": TrainConfig,
            "wba": AttackConfig,
            "bba": AttackConfig,
            "ta": AttackConfig,
            "ablation": AblationConfig,
            "adaptive": AdaptiveConfig,
        }
        kwargs = {}
        for key, value in d.items():
            if key in nested:
                base = asdict(getattr(cls(), key)) if key == "ta" else {}
                kwargs[key] = nested[key](**{**base, **value})
            elif key == "defenses":
                kwargs[key] = [DefenseConfig(**v) for v in value]
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return cls.from_dict(tomllib.loads(text))
        return cls.from_dict(json.loads(text))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def fmt_norm(norm: float) -> str:
    return "inf" if norm == math.inf else f"{norm:g}"
