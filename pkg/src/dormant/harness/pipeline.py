"""Resumable end-to-end experiment: data -> clean/backdoored models -> defenses -> BEC -> attacks.

Every artifact lives under ``cfg.output_dir``. A stage whose artifact already
exists is loaded instead of recomputed, so a second invocation with the same
configuration does no training.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import torch

from .. import attack as atk
from ..bec import BECReport, NeuronSelection, bec, select_backdoor_neurons, tac_scores
from ..data import (
    ImageDataset,
    InvalidInputError,
    apply_trigger,
    make_trigger,
    poison_dataset,
    poisoned_pool,
    subset_indices,
    synthetic_splits,
)
from ..defense import METHODS, DefenseConfig, clean_subset, defend, index_hash
from ..model import (
    Classifier,
    evaluate_acc,
    evaluate_asr,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .config import AttackConfig, ExperimentConfig, derive_seed

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("attack", "defense", "acc", "asr_defense", "asr_wba", "asr_bba", "asr_ta", "bec", "queries")
MODES = ("wba", "bba", "ta")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class ConfigMismatchError(RuntimeError):
    pass


@dataclass
class RunRecord:
    config_hash: str
    checkpoints: dict
    metrics: dict
    bec: dict
    attacks: dict
    pearson: dict
    rows: list
    timestamps: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def format_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_results_csv(rows: list[dict], path):
    """Write ``rows`` with the fixed result columns; any other key set is an error."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for row in rows:
        if set(row) != set(RESULT_COLUMNS):
            raise InvalidInputError(f"result row keys {sorted(row)} do not match {RESULT_COLUMNS}")
        w.writerow([format_value(row[c]) for c in RESULT_COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise InvalidInputError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def pearson(x, y) -> dict:
    """Pearson r with an explicit marker instead of NaN for constant inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise InvalidInputError("pearson inputs differ in length")
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return {"r": None, "n": int(len(x)), "degenerate": True}
    xc, yc = x - x.mean(), y - y.mean()
    r = float(np.clip((xc @ yc) / math.sqrt((xc @ xc) * (yc @ yc)), -1, 1))
    return {"r": r, "n": int(len(x)), "degenerate": False}


class Pipeline:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._claim_output_dir()
        self._models: dict[str, Classifier] = {}

    # -- bookkeeping ---------------------------------------------------------

    def _claim_output_dir(self):
        stored = self.out / "config.json"
        canonical = self.cfg.canonical()
        if stored.exists():
            if stored.read_bytes() != canonical:
                raise ConfigMismatchError(
                    f"{self.out} holds a run with a different configuration; use a fresh output directory"
                )
        else:
            stored.write_bytes(canonical)

    def seed(self, name: str) -> int:
        return derive_seed(self.cfg.seed, name)

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def directory(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.mkdir(parents=True, exist_ok=True)
        return p

    def _stage(self, name, fn, *args):
        try:
            return fn(*args)
        except (StageError, ConfigMismatchError):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc

    # -- stage I: data -------------------------------------------------------

    @cached_property
    def splits(self) -> tuple[ImageDataset, ImageDataset]:
        spec = replace(self.cfg.dataset, seed=self.seed(f"data:{self.cfg.dataset.seed}"))
        return synthetic_splits(spec)

    @property
    def train_set(self):
        return self.splits[0]

    @property
    def test_set(self):
        return self.splits[1]

    @cached_property
    def trigger(self):
        t = self.cfg.trigger
        shape = self.train_set.image_shape
        if t.name == "badnets":
            return make_trigger("badnets", shape, t.target, size=t.patch_size)
        return make_trigger(t.name, shape, t.target, seed=self.seed("trigger"), alpha=t.alpha)

    @cached_property
    def poisoned(self) -> tuple[ImageDataset, torch.Tensor]:
        pc = replace(self.cfg.poison, seed=self.seed(f"poison:{self.cfg.poison.seed}"))
        ds, idx = poison_dataset(self.train_set, self.trigger, pc)
        manifest = self.path("data", "poison.json")
        if not manifest.exists():
            manifest.write_text(json.dumps({
                "poison_indices": idx.tolist(),
                "ratio": pc.ratio,
                "seed": pc.seed,
                "trigger": self.trigger.to_dict(),
            }))
            self.trigger.save(self.path("data", "trigger.json"))
        return ds, idx

    def attacker_indices(self, fraction: float, tag: str) -> torch.Tensor:
        return subset_indices(len(self.train_set), fraction, self.seed(f"attacker:{tag}"))

    def attacker_images(self, fraction: float, tag: str) -> torch.Tensor:
        """Triggered training images handed to the adversary (all relabeled to the target)."""
        idx = self.attacker_indices(fraction, tag)
        return apply_trigger(self.train_set.images[idx], self.trigger)

    @cached_property
    def defense_clean(self) -> tuple[ImageDataset, torch.Tensor]:
        fractions = {d.clean_fraction for d in self.cfg.defenses} or {0.05}
        if len(fractions) > 1:
            raise InvalidInputError("all defenses must share one clean fraction")
        return clean_subset(self.train_set, fractions.pop(), self.seed("defense-clean"))

    def export_datasets(self):
        """Write dataset manifests for the poisoned training set and the attacker subset."""
        ds, _ = self.poisoned
        ds.save(self.directory("data", "poisoned_train"), self.seed("poison"), self.trigger)
        pool = poisoned_pool(self.train_set, self.trigger)
        pool.subset(self.attacker_indices(self.cfg.wba.fraction, "wba")).save(
            self.directory("data", "attacker"), self.seed("attacker:wba"), self.trigger)
        self.defense_clean[0].save(self.directory("data", "defense_clean"), self.seed("defense-clean"))

    # -- models ----------------------------------------------------------------

    def _model(self, key, build):
        if key in self._models:
            return self._models[key]
        ckpt = self.path("checkpoints", f"{key}.pt")
        if ckpt.exists():
            model = load_checkpoint(ckpt)
        else:
            log.info("building %s", key)
            model, extra = build()
            save_checkpoint(model, ckpt, extra)
        self._models[key] = model
        return model

    def clean_model(self) -> Classifier:
        def build():
            tc = replace(self.cfg.train, seed=self.seed(f"train-clean:{self.cfg.train.seed}"))
            return train(self.train_set, tc, tuple(self.cfg.widths), role="clean"), {"seed": tc.seed}
        return self._stage("train-clean", self._model, "clean", build)

    def backdoored_model(self) -> Classifier:
        def build():
            tc = replace(self.cfg.train, seed=self.seed(f"train-backdoor:{self.cfg.train.seed}"))
            return train(self.poisoned[0], tc, tuple(self.cfg.widths), role="backdoored"), {"seed": tc.seed}
        return self._stage("train-backdoor", self._model, "backdoored", build)

    def defense_config(self, label: str) -> DefenseConfig:
        for d in self.cfg.defenses:
            if d.label == label:
                return d
        raise InvalidInputError(f"no defense labelled {label!r}")

    def defended_model(self, label: str) -> Classifier:
        dcfg = self.defense_config(label)

        def build():
            run_cfg = replace(dcfg, seed=self.seed(f"defense:{label}"))
            clean, idx = self.defense_clean
            model = defend(self.backdoored_model(), clean, run_cfg)
            provenance = {"method": dcfg.method, "seed": run_cfg.seed, "clean_index_hash": index_hash(idx)}
            model.provenance["defense_record"] = provenance
            return model, provenance
        return self._stage(f"defend:{label}", self._model, f"defended_{label}", build)

    def model(self, label: str) -> Classifier:
        if label == "clean":
            return self.clean_model()
        if label in ("backdoored", "none"):
            return self.backdoored_model()
        return self.defended_model(label)

    def surrogate(self, method: str, k: int) -> Classifier:
        """Adversary-built defended copy of the backdoored model (transfer-attack surrogate)."""
        template = next((d for d in self.cfg.defenses if d.method == method), DefenseConfig(method))

        def build():
            run_cfg = replace(template, seed=self.seed(f"surrogate:{method}:{k}"))
            clean, idx = clean_subset(self.train_set, template.clean_fraction, self.seed("surrogate-clean"))
            model = defend(self.backdoored_model(), clean, run_cfg)
            return model, {"method": method, "seed": run_cfg.seed, "clean_index_hash": index_hash(idx)}
        return self._stage(f"surrogate:{method}:{k}", self._model, f"surrogate_{method}_{k}", build)

    def surrogate_pool(self, label: str, size: int | None = None) -> list[tuple[str, Classifier]]:
        """Surrogates built with the defense methods other than the target's own."""
        size = size or self.cfg.ta.surrogates
        target_method = self.defense_config(label).method if label not in ("clean", "none") else None
        methods = [m for m in METHODS if m != target_method]
        pool = []
        for i in range(size):
            m, k = methods[i % len(methods)], i // len(methods)
            pool.append((f"{m}#{k}", self.surrogate(m, k)))
        return pool

    # -- measurements ------------------------------------------------------------

    def metrics(self, label: str) -> dict:
        model = self.model(label)
        return {
            "acc": evaluate_acc(model, self.test_set),
            "asr": evaluate_asr(model, self.test_set, self.trigger),
        }

    @cached_property
    def selection(self) -> NeuronSelection:
        path = self.path("bec", "selection.json")
        if path.exists():
            return NeuronSelection(**json.loads(path.read_text()))
        idx = self.attacker_indices(self.cfg.wba.fraction, "wba")
        tac = tac_scores(self.backdoored_model(), self.train_set.images[idx], self.trigger)
        sel = select_backdoor_neurons(tac, self.cfg.bec_fraction)
        path.write_text(json.dumps(sel.to_dict()))
        return sel

    def bec_report(self, label: str) -> BECReport:
        path = self.path("bec", f"{label}.json")
        if path.exists():
            return BECReport.from_dict(json.loads(path.read_text()))

        def compute():
            x = self.attacker_images(self.cfg.wba.fraction, "wba")
            return bec(self.model(label), self.backdoored_model(), self.clean_model(), x, self.selection)
        report = self._stage(f"bec:{label}", compute)
        report.save(path)
        return report

    def run_attack(self, model_label: str, mode: str, acfg: AttackConfig | None = None,
                   x: torch.Tensor | None = None, oracle_noise: float = 0.0, tag: str = "") -> atk.AttackResult:
        """Run one attack (uncached). ``x`` defaults to the attacker subset of ``acfg.fraction``."""
        acfg = acfg or getattr(self.cfg, mode)
        t = self.trigger.target
        if x is None:
            x = self.attacker_images(acfg.fraction, mode)
        target = self.model(model_label)
        budget = acfg.budget
        if mode == "wba":
            res = atk.wba_pgd(target, x, t, budget, acfg.lam, acfg.steps, acfg.step_size)
        elif mode == "bba":
            oracle = atk.QueryOracle(target, noise=oracle_noise, seed=self.seed(f"oracle:{model_label}:{tag}"))
            res = atk.bba_square(oracle, x, t, budget, acfg.iterations, acfg.eps, acfg.lam,
                                 seed=self.seed(f"bba:{model_label}:{tag}"), query_budget=acfg.query_budget)
            if oracle_noise > 0:
                res.test_asr = atk.oracle_asr(oracle, self._asr_images(), res.delta, t)
                res.meta["oracle_noise"] = oracle_noise
        elif mode == "ta":
            pool = self.surrogate_pool(model_label, acfg.surrogates)
            res = atk.ta_ensemble([m for _, m in pool], x, t, budget, acfg.lam, acfg.steps, acfg.step_size)
            res.meta["surrogate_ids"] = [name for name, _ in pool]
            res.meta["target"] = model_label
        else:
            raise InvalidInputError(f"unknown attack mode {mode!r}")
        if res.test_asr is None:
            res.test_asr = evaluate_asr(target, self.test_set, self.trigger, res.delta)
        res.meta["n_attacker"] = len(x)
        return res

    def _asr_images(self):
        keep = self.test_set.labels != self.trigger.target
        return apply_trigger(self.test_set.images[keep], self.trigger)

    def attack(self, label: str, mode: str) -> atk.AttackResult:
        directory = self.directory("attacks", label)
        if (directory / f"{mode}.json").exists():
            return atk.AttackResult.load(directory, mode)
        res = self._stage(f"attack:{mode}:{label}", self.run_attack, label, mode)
        res.save(directory, mode)
        return res

    # -- whole pipeline ----------------------------------------------------------

    def run(self) -> RunRecord:
        started = time.time()
        cfg = self.cfg
        self._stage("poison", lambda: self.poisoned)
        labels = [d.label for d in cfg.defenses]
        metrics = {"clean": self.metrics("clean"), "none": self.metrics("none")}
        for label in labels:
            metrics[label] = self.metrics(label)
        becs = {label: self.bec_report(label) for label in labels}
        attacks = {label: {mode: self.attack(label, mode) for mode in MODES} for label in labels}
        rows = [self._row("none", metrics["none"], None, {})]
        for label in labels:
            rows.append(self._row(label, metrics[label], becs[label], attacks[label]))
        write_results_csv(rows, self.out / "results.csv")
        combined = {label: becs[label].to_dict() for label in labels}
        (self.out / "bec_report.json").write_text(json.dumps(combined, indent=2))
        corr = pearson([becs[l].value for l in labels], [attacks[l]["wba"].test_asr for l in labels])
        record = RunRecord(
            config_hash=cfg.hash(),
            checkpoints={k: str(self.path("checkpoints", f"{k}.pt"))
                         for k in ["clean", "backdoored"] + [f"defended_{l}" for l in labels]},
            metrics=metrics,
            bec=combined,
            attacks={l: {m: r.to_dict() for m, r in a.items()} for l, a in attacks.items()},
            pearson=corr,
            rows=rows,
            timestamps={"started": started, "finished": time.time()},
        )
        record.save(self.out / "run_record.json")
        return record

    def _row(self, label, m, report, attacks) -> dict:
        def asr(mode):
            return attacks[mode].test_asr if mode in attacks else None

        return {
            "attack": self.trigger.name,
            "defense": label,
            "acc": m["acc"],
            "asr_defense": m["asr"],
            "asr_wba": asr("wba"),
            "asr_bba": asr("bba"),
            "asr_ta": asr("ta"),
            "bec": report.value if report is not None else 1.0,
            "queries": attacks["bba"].queries_per_image if "bba" in attacks else None,
        }


def run_pipeline(cfg: ExperimentConfig) -> RunRecord:
    return Pipeline(cfg).run()
