"""Ablations and side studies built on a :class:`Pipeline`."""

from __future__ import annotations

import csv
from dataclasses import replace

from ..attack import QueryOracle
from ..data import InvalidInputError
from ..model import evaluate_acc
from .config import fmt_norm
from .pipeline import Pipeline

NORM_COLUMNS = ("defense", "norm", "radius", "asr_wba")
SAMPLE_COLUMNS = ("defense", "count", "asr_wba", "asr_bba")
CONTRAST_COLUMNS = ("model", "asr_wba", "asr_bba")
ADAPTIVE_COLUMNS = ("defense", "noise", "acc", "asr_bba", "queries")


def write_table(rows: list[dict], columns, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if set(row) != set(columns):
                raise InvalidInputError(f"row keys {sorted(row)} do not match {columns}")
            w.writerow([f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in columns])


def ablate_norm(pipe: Pipeline, norms=None, bounds=None, defense: str | None = None, out=None) -> list[dict]:
    """White-box ASR for every (norm, radius) cell; radius 0 reproduces the undefended-trigger baseline."""
    defense = defense or pipe.cfg.ablation.defense
    table = bounds or pipe.cfg.ablation.bounds
    norms = norms or list(table)
    rows = []
    for norm in norms:
        for radius in [0.0] + sorted(float(r) for r in table[str(norm)]):
            acfg = replace(pipe.cfg.wba, norm=str(norm), radius=radius)
            res = pipe.run_attack(defense, "wba", acfg)
            rows.append({"defense": defense, "norm": fmt_norm(acfg.budget.norm), "radius": radius,
                         "asr_wba": res.test_asr})
    write_table(rows, NORM_COLUMNS, out or pipe.out / "ablation_norm.csv")
    return rows


def ablate_sample_count(pipe: Pipeline, counts=None, defense: str | None = None, out=None) -> list[dict]:
    """WBA/BBA ASR as a function of the number of triggered images available to the attacker."""
    defense = defense or pipe.cfg.ablation.defense
    counts = counts or pipe.cfg.ablation.sample_counts
    n = len(pipe.train_set)
    rows = []
    for count in counts:
        if not 1 <= count <= n:
            raise InvalidInputError(f"sample count {count} outside [1, {n}]")
        x = pipe.attacker_images(count / n, f"samples:{count}")
        wba = pipe.run_attack(defense, "wba", x=x)
        bba_cfg = replace(pipe.cfg.bba, iterations=pipe.cfg.ablation.bba_iterations)
        bba = pipe.run_attack(defense, "bba", bba_cfg, x=x, tag=f"samples:{count}")
        rows.append({"defense": defense, "count": count, "asr_wba": wba.test_asr, "asr_bba": bba.test_asr})
    write_table(rows, SAMPLE_COLUMNS, out or pipe.out / "ablation_samples.csv")
    return rows


def clean_model_contrast(pipe: Pipeline, out=None) -> list[dict]:
    """Same attacks, same budgets, against the clean model and every defended model."""
    rows = []
    for label in ["clean"] + [d.label for d in pipe.cfg.defenses]:
        if label == "clean":
            wba, bba = pipe.run_attack("clean", "wba"), pipe.run_attack("clean", "bba")
        else:
            wba, bba = pipe.attack(label, "wba"), pipe.attack(label, "bba")
        rows.append({"model": label, "asr_wba": wba.test_asr, "asr_bba": bba.test_asr})
    write_table(rows, CONTRAST_COLUMNS, out or pipe.out / "clean_contrast.csv")
    return rows


def adaptive_defense_eval(pipe: Pipeline, noise_levels=None, defense: str | None = None, out=None) -> list[dict]:
    """Clean accuracy and black-box ASR when the defender perturbs every query with uniform noise.

    Accuracy is measured through the same noisy oracle the attacker faces. The
    attack seed does not depend on the noise level, so level 0 reproduces the
    non-adaptive black-box run exactly.
    """
    defense = defense or pipe.cfg.adaptive.defense
    levels = pipe.cfg.adaptive.noise_levels if noise_levels is None else noise_levels
    model = pipe.model(defense)
    test = pipe.test_set
    rows = []
    for eta in levels:
        eta = float(eta)
        if eta < 0:
            raise InvalidInputError("noise level must be non-negative")
        if eta == 0:
            acc = evaluate_acc(model, test)
        else:
            oracle = QueryOracle(model, noise=eta, seed=pipe.seed(f"adaptive-acc:{eta}"))
            acc = (oracle.predict(test.images) == test.labels).float().mean().item()
        res = pipe.run_attack(defense, "bba", oracle_noise=eta)
        rows.append({"defense": defense, "noise": eta, "acc": acc, "asr_bba": res.test_asr,
                     "queries": res.queries_per_image})
    write_table(rows, ADAPTIVE_COLUMNS, out or pipe.out / "adaptive.csv")
    return rows
