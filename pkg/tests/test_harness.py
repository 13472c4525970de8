import json

import pytest

from overlearn.harness import (
    ConfigError,
    ExperimentConfig,
    audit_no_probe_leak,
    config_from_dict,
    load_config,
    render_tables,
    report_bytes,
    run_experiment,
)

SMALL = {
    "data": {"joint": [[0.25, 0.25], [0.25, 0.25]], "n": 400, "feature_dim": 8,
             "noise_scale": 0.3},
    "model": {"hidden_widths": [16, 8], "epochs": 3},
    "censor": {"methods": ["adversarial", "info_theoretic"], "adversarial_epochs": 3},
    "attacks": {"run": ["infer", "decensor", "repurpose", "unrepresented"], "epochs": 3,
                "widths": [16], "transfer_fracs": [0.1, 1.0], "repurpose_epochs": 2,
                "keep_attr": 0},
    "analysis": {"cka": True},
    "experiment": {"seeds": [1, 2]},
}


def test_minimal_config_reports_base_only():
    cfg = config_from_dict({"data": SMALL["data"], "model": SMALL["model"]})
    report = run_experiment(cfg)
    assert [c["name"] for c in report["conditions"]] == ["BASE"]
    row = report["conditions"][0]
    assert 0.0 <= row["task_acc"] <= 1.0 and row["attr_acc"] is None
    assert 0.0 < row["rand_task"] <= 1.0 and 0.0 < row["rand_attr"] <= 1.0
    assert report["decensor"] == [] and report["repurpose"] == []


def test_report_schema_and_ranges(tmp_path):
    report = run_experiment(config_from_dict(SMALL), tmp_path)
    on_disk = json.loads((tmp_path / "report.json").read_text())
    for key in ("schema_version", "config_digest", "cramers_v", "conditions", "decensor",
                "repurpose", "cka", "seeds", "wall_clock_s"):
        assert key in on_disk
    assert [c["name"] for c in report["conditions"]] == ["BASE", "ADV", "IT"]
    for c in report["conditions"]:
        for k in ("task_acc", "attr_acc", "rand_task", "rand_attr"):
            assert 0.0 <= c[k] <= 1.0
    adv = next(c for c in report["conditions"] if c["name"] == "ADV")
    d = next(d for d in report["decensor"] if d["condition"] == "ADV")
    assert d["delta"] == pytest.approx(d["acc"] - adv["attr_acc"])
    for r in report["repurpose"]:
        assert r["delta"] == pytest.approx(r["repurposed_acc"] - r["scratch_acc"])
    assert {c["pair"] for c in report["cka"]} == {"BASE~ADV", "BASE~IT"}
    for c in report["cka"]:
        assert (tmp_path / c["csv_path"]).exists()
    for seed_result in report["per_seed"]:
        for row in seed_result["conditions"]:
            assert row["seed"] == seed_result["seed"]
            assert (tmp_path / row["checkpoint"]).exists()
    assert report["failures"] == []


def test_seed_mean_aggregation():
    report = run_experiment(config_from_dict(SMALL))
    base = [c["task_acc"] for r in report["per_seed"] for c in r["conditions"] if c["name"] == "BASE"]
    assert report["conditions"][0]["task_acc"] == pytest.approx(sum(base) / len(base))


def test_deterministic_report():
    cfg = config_from_dict(SMALL)
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert report_bytes(a, exclude_timing=True) == report_bytes(b, exclude_timing=True)


def test_stage_failure_is_recorded(monkeypatch):
    import overlearn.harness as h

    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(h, "train_it_censored", broken)
    report = run_experiment(config_from_dict(SMALL))
    assert {f["condition"] for f in report["failures"]} == {"IT"}
    it = next(c for c in report["conditions"] if c["name"] == "IT")
    assert it["task_acc"] is None
    assert "IT" in render_tables(report)


@pytest.mark.parametrize("patch", [
    {"experiment": {"seeds": []}},
    {"censor": {"methods": ["dropout"]}},
    {"censor": {"layer": 3}},
    {"attacks": {"run": ["repurpose"], "repurpose_layers": [5], "transfer_fracs": [0.1]}},
    {"attacks": {"run": ["repurpose"]}},
    {"bogus": {}},
    {"model": {"depth": 3}},
])
def test_invalid_configs(patch):
    raw = {"data": SMALL["data"], "model": SMALL["model"], **patch}
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_reference_config_parses():
    from pathlib import Path

    cfg = load_config(Path(__file__).parents[1] / "docs" / "repro-table2.toml")
    assert cfg.seeds == [1, 2, 3]
    assert cfg.gamma == 1.0 and cfg.beta == 0.01 and cfg.lambda_ == 0.0001


def test_digest_ignores_output_dir():
    assert ExperimentConfig(output_dir="a").digest() == ExperimentConfig(output_dir="b").digest()
    assert ExperimentConfig(seeds=[1]).digest() != ExperimentConfig(seeds=[2]).digest()


def test_probe_audit():
    from overlearn.data import LabeledExample
    import numpy as np

    probe = [LabeledExample(np.zeros(1), 0, 0, uid=i) for i in (3, 4)]
    audit_no_probe_leak({"aux_uids": [1, 2]}, probe)
    with pytest.raises(AssertionError):
        audit_no_probe_leak({"aux_uids": [1, 4]}, probe)
