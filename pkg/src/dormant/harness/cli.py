"""Command line entry point: ``dormant <stage> --config cfg.toml``.

Every subcommand runs the stages it depends on (loading them from the output
directory when already present) and exits 0 only if all of them succeed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from ..data import InvalidInputError
from . import experiments, report
from .config import ExperimentConfig
from .pipeline import MODES, ConfigMismatchError, Pipeline, StageError

log = logging.getLogger("dormant")


def _defense_labels(pipe, requested):
    labels = [d.label for d in pipe.cfg.defenses]
    if requested is None:
        return labels
    pipe.defense_config(requested)
    return [requested]


def cmd_poison(pipe, args):
    pipe._stage("poison", pipe.export_datasets)
    print(f"poisoned {len(pipe.poisoned[1])} of {len(pipe.train_set)} training images -> {pipe.out / 'data'}")


def cmd_train(pipe, args):
    for label in ("clean", "none"):
        m = pipe.metrics(label)
        print(f"{pipe.model(label).role:10s} acc={m['acc']:.4f} asr={m['asr']:.4f}")


def cmd_defend(pipe, args):
    for label in _defense_labels(pipe, args.defense):
        m = pipe.metrics(label)
        print(f"{label:24s} acc={m['acc']:.4f} asr={m['asr']:.4f}")


def cmd_bec(pipe, args):
    reports = {label: pipe.bec_report(label) for label in _defense_labels(pipe, args.defense)}
    (pipe.out / "bec_report.json").write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2))
    for label, r in reports.items():
        print(f"{label:24s} bec={r.value:.4f} skipped={r.skipped}")


def cmd_attack(pipe, args):
    for label in _defense_labels(pipe, args.defense):
        res = pipe.attack(label, args.mode)
        print(f"{label:24s} {args.mode} asr={res.test_asr:.4f} queries/image={res.queries_per_image}")


def cmd_ablate(pipe, args):
    if args.kind == "norm":
        rows = experiments.ablate_norm(pipe, defense=args.defense)
    else:
        rows = experiments.ablate_sample_count(pipe, defense=args.defense)
    for row in rows:
        print(", ".join(f"{k}={v}" for k, v in row.items()))


def cmd_adaptive(pipe, args):
    for row in experiments.adaptive_defense_eval(pipe, defense=args.defense):
        print(f"noise={row['noise']:.2f} acc={row['acc']:.4f} asr_bba={row['asr_bba']:.4f}")


def cmd_contrast(pipe, args):
    for row in experiments.clean_model_contrast(pipe):
        print(f"{row['model']:24s} wba={row['asr_wba']:.4f} bba={row['asr_bba']:.4f}")


def cmd_report(pipe, args):
    record = pipe.run()
    corr = report.write_reports(pipe, record)
    r = "degenerate" if corr["r"] is None else f"{corr['r']:.4f}"
    print(f"results -> {pipe.out / 'results.csv'}; pearson r(BEC, WBA ASR) = {r}")


def cmd_run(pipe, args):
    cmd_poison(pipe, args)
    cmd_report(pipe, args)
    if pipe.cfg.defenses and not args.skip_studies:
        experiments.ablate_norm(pipe)
        experiments.ablate_sample_count(pipe)
        experiments.clean_model_contrast(pipe)
        experiments.adaptive_defense_eval(pipe)
        print(f"ablation, contrast and adaptive tables -> {pipe.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dormant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help, defense=False):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="experiment config (.json or .toml)")
        p.add_argument("--output", help="override the configured output directory")
        if defense:
            p.add_argument("--defense", help="restrict to one defense label")
        p.set_defaults(fn=fn)
        return p

    add("poison", cmd_poison, "build the poisoned training set and attacker subset")
    add("train", cmd_train, "train the clean and backdoored models")
    add("defend", cmd_defend, "apply the configured defenses", defense=True)
    add("bec", cmd_bec, "measure backdoor existence of each defended model", defense=True)
    p = add("attack", cmd_attack, "re-activate the backdoor of each defended model", defense=True)
    p.add_argument("--mode", choices=MODES, required=True)
    p = add("ablate", cmd_ablate, "norm-bound or sample-count ablation", defense=True)
    p.add_argument("kind", choices=("norm", "samples"))
    add("adaptive", cmd_adaptive, "black-box attack against a noisy query oracle", defense=True)
    add("contrast", cmd_contrast, "attack the clean model under the same budgets")
    add("report", cmd_report, "results.csv, bec_report.json and plots")
    p = add("run", cmd_run, "every stage plus ablations and side studies")
    p.add_argument("--skip-studies", action="store_true", help="stop after the main results table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.output:
            cfg = replace(cfg, output_dir=args.output)
        pipe = Pipeline(cfg)
        args.fn(pipe, args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InvalidInputError, ConfigMismatchError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
