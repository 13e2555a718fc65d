import json
import math
from pathlib import Path

import pytest

from dormant.data import InvalidInputError
from dormant.harness import ExperimentConfig, Pipeline, derive_seed, pearson, read_results_csv, write_results_csv
from dormant.harness.cli import main
from dormant.harness.config import AttackConfig, fmt_norm
from dormant.harness.pipeline import RESULT_COLUMNS, ConfigMismatchError
from dormant.harness.report import correlation_report

TINY = {
    "seed": 1,
    "dataset": {"n_train": 200, "n_test": 100, "size": 16},
    "train": {"epochs": 1, "batch_size": 32},
    "widths": [4, 8],
    "defenses": [
        {"method": "finetune", "epochs": 1, "clean_fraction": 0.1},
        {"method": "reinit-head-finetune", "epochs": 1, "clean_fraction": 0.1},
        {"method": "adversarial-finetune", "epochs": 1, "clean_fraction": 0.1, "adv_steps": 1},
    ],
    "wba": {"steps": 2, "fraction": 0.05},
    "bba": {"iterations": 4, "fraction": 0.05},
    "ta": {"steps": 2, "surrogates": 2},
    "ablation": {"bounds": {"inf": [0.01, 0.05], "2": [0.5]}, "sample_counts": [4, 8], "bba_iterations": 2},
    "adaptive": {"noise_levels": [0.0, 0.05]},
}


def tiny_config(tmp_path, **overrides):
    return ExperimentConfig.from_dict({**TINY, "output_dir": str(tmp_path / "run"), **overrides})


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "train") == derive_seed(0, "train")
    assert len({derive_seed(0, n) for n in ("a", "b", "c")}) == 3
    assert derive_seed(1, "a") != derive_seed(0, "a")
    assert 0 <= derive_seed(123, "x") < 2**31


def test_config_round_trip_json_and_toml(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json").canonical() == cfg.canonical()
    toml = '''seed = 1
output_dir = "x"
widths = [4, 8]
[dataset]
n_train = 200
n_test = 100
size = 16
[wba]
norm = "2"
radius = 1.0
[[defenses]]
method = "finetune"
'''
    (tmp_path / "c.toml").write_text(toml)
    loaded = ExperimentConfig.load(tmp_path / "c.toml")
    assert loaded.wba.budget.norm == 2 and loaded.defenses[0].method == "finetune" and len(loaded.defenses) == 1
    # partially specified transfer config keeps its own defaults
    assert ExperimentConfig.from_dict({"ta": {"steps": 3}}).ta.budget.norm == 2


def test_config_hash_ignores_output_dir(tmp_path):
    a = tiny_config(tmp_path)
    b = ExperimentConfig.from_dict({**TINY, "output_dir": "elsewhere"})
    assert a.hash() == b.hash()
    assert a.hash() != ExperimentConfig.from_dict({**TINY, "seed": 2}).hash()


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(InvalidInputError):
        ExperimentConfig.from_dict({"trigger": {"target": 10}})
    with pytest.raises(InvalidInputError):
        ExperimentConfig.from_dict({"defenses": [{"method": "finetune"}, {"method": "finetune"}]})
    with pytest.raises(InvalidInputError):
        ExperimentConfig.from_dict({"defenses": [{"method": "prune"}]})
    with pytest.raises(InvalidInputError):
        AttackConfig(norm="1").budget


def test_pearson_identities():
    assert pearson([0, 1, 2], [1, 3, 5]) == {"r": 1.0, "n": 3, "degenerate": False}
    assert pearson([0, 1, 2], [5, 3, 1])["r"] == -1.0
    flat = pearson([0.4, 0.4, 0.4], [0.1, 0.5, 0.9])
    assert flat["degenerate"] and flat["r"] is None
    with pytest.raises(InvalidInputError):
        pearson([1, 2], [1])


def test_results_csv_schema(tmp_path):
    row = dict.fromkeys(RESULT_COLUMNS, 0.5)
    write_results_csv([row], tmp_path / "r.csv")
    assert read_results_csv(tmp_path / "r.csv")[0]["acc"] == "0.500000"
    with pytest.raises(InvalidInputError):
        write_results_csv([{**row, "extra": 1}], tmp_path / "bad.csv")
    (tmp_path / "bad.csv").write_text("attack,defense\nx,y\n")
    with pytest.raises(InvalidInputError):
        read_results_csv(tmp_path / "bad.csv")


def test_correlation_report_collinear(tmp_path):
    record = {
        "bec": {f"d{i}": {"bec": b} for i, b in enumerate([0.2, 0.5, 0.8])},
        "metrics": {f"d{i}": {"asr": 0.0} for i in range(3)},
        "attacks": {f"d{i}": {"wba": {"test_asr": a}} for i, a in enumerate([0.3, 0.6, 0.9])},
    }
    out = correlation_report([record], tmp_path / "s.png")
    assert abs(out["r"] - 1.0) <= 1e-12 and (tmp_path / "s.png").stat().st_size > 0


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tiny")
    cfg = ExperimentConfig.from_dict({**TINY, "output_dir": str(tmp / "run")})
    cfg.save(tmp / "cfg.json")
    code = main(["run", "--config", str(tmp / "cfg.json")])
    return tmp, cfg, code


def test_cli_run_writes_all_artifacts(tiny_run):
    tmp, cfg, code = tiny_run
    assert code == 0
    out = tmp / "run"
    rows = read_results_csv(out / "results.csv")
    assert [r["defense"] for r in rows] == ["none", "finetune", "reinit-head-finetune", "adversarial-finetune"]
    for name in ("bec_report.json", "run_record.json", "bec_vs_asr.png", "feature_maps.png", "ablation_norm.csv",
                 "ablation_samples.csv", "clean_contrast.csv", "adaptive.csv", "config.json"):
        assert (out / name).exists(), name
    record = json.loads((out / "run_record.json").read_text())
    assert record["config_hash"] == cfg.hash()
    assert all(Path(p).exists() for p in record["checkpoints"].values())
    assert set(record["attacks"]["finetune"]) == {"wba", "bba", "ta"}
    surrogate_methods = {s.split("#")[0] for s in record["attacks"]["finetune"]["ta"]["meta"]["surrogate_ids"]}
    assert "finetune" not in surrogate_methods


def test_norm_ablation_zero_radius_is_baseline(tiny_run):
    tmp, cfg, _ = tiny_run
    rows = (tmp / "run" / "ablation_norm.csv").read_text().splitlines()
    assert rows[0] == "defense,norm,radius,asr_wba"
    baseline = next(r for r in read_results_csv(tmp / "run" / "results.csv") if r["defense"] == "finetune")
    zero = [r.split(",") for r in rows[1:] if r.split(",")[2] == "0.000000"]
    assert len(zero) == 2 and all(z[3] == baseline["asr_defense"] for z in zero)


def test_rerun_does_not_retrain(tiny_run):
    tmp, cfg, _ = tiny_run
    ckpts = sorted((tmp / "run" / "checkpoints").glob("*.pt"))
    before = {p: p.stat().st_mtime_ns for p in ckpts}
    results = (tmp / "run" / "results.csv").read_bytes()
    assert main(["report", "--config", str(tmp / "cfg.json")]) == 0
    assert {p: p.stat().st_mtime_ns for p in ckpts} == before
    assert (tmp / "run" / "results.csv").read_bytes() == results


def test_single_stage_commands(tiny_run, capsys):
    tmp, _, _ = tiny_run
    for argv in (["train"], ["poison"], ["defend", "--defense", "finetune"], ["bec"], ["attack", "--mode", "wba"],
                 ["ablate", "norm"], ["adaptive"], ["contrast"]):
        assert main([*argv, "--config", str(tmp / "cfg.json")]) == 0, argv
    assert "bec=" in capsys.readouterr().out


def test_config_mismatch_is_rejected(tiny_run, tmp_path):
    tmp, _, _ = tiny_run
    other = ExperimentConfig.from_dict({**TINY, "seed": 9, "output_dir": str(tmp / "run")})
    with pytest.raises(ConfigMismatchError):
        Pipeline(other)
    other.save(tmp_path / "other.json")
    assert main(["train", "--config", str(tmp_path / "other.json")]) == 2


def test_unknown_defense_label_fails(tiny_run):
    tmp, _, _ = tiny_run
    assert main(["defend", "--defense", "nope", "--config", str(tmp / "cfg.json")]) != 0


def test_stage_failure_exit_code(tmp_path):
    cfg = tiny_config(tmp_path, poison={"ratio": 0.001})
    cfg.save(tmp_path / "c.json")
    assert main(["poison", "--config", str(tmp_path / "c.json")]) == 1


def test_no_defense_config(tmp_path):
    cfg = tiny_config(tmp_path, defenses=[])
    record = Pipeline(cfg).run()
    assert record.bec == {} and record.attacks == {}
    assert set(record.metrics) == {"clean", "none"}
    assert record.pearson["degenerate"]
    assert [r["defense"] for r in read_results_csv(tmp_path / "run" / "results.csv")] == ["none"]


def test_norm_values_are_formatted():
    assert fmt_norm(math.inf) == "inf" and fmt_norm(2.0) == "2"
