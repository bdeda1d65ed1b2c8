import csv
import json

import numpy as np
import pytest

from fairmig import cli, harness
from fairmig.config import ExperimentConfig, stream, stream_seed
from fairmig.errors import ComparisonError, ConfigError

TINY = dict(synth_n_nodes="150", ssl_epochs="4", sup_epochs="8", hidden_dim="8", out_dim="8",
            seeds="0,1")


def tiny(**kw):
    return ExperimentConfig.from_mapping({**TINY, **kw})


def test_config_file_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nname = demo\nlambda = 5\nbeta = 0.05\nseeds = 1, 2, 3\nvariant = wo_adv\n")
    cfg = ExperimentConfig.from_file(p)
    assert cfg.lam == 5.0 and cfg.beta == 0.05 and cfg.seeds == (1, 2, 3) and cfg.variant == "wo_adv"
    again = tmp_path / "again.cfg"
    again.write_text(cfg.to_text())
    assert ExperimentConfig.from_file(again) == cfg


@pytest.mark.parametrize("bad", [{"alpha": "1.5"}, {"lambda": "-1"}, {"seeds": ""},
                                 {"variant": "nope"}, {"colour": "red"},
                                 {"adversary_objective": "x"}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping(bad)


def test_streams_are_labeled_and_deterministic():
    assert stream_seed(0, "init") == stream_seed(0, "init")
    assert len({stream_seed(0, k) for k in ("init", "split", "shuffle", "synthetic")}) == 4
    assert stream_seed(0, "init") != stream_seed(1, "init")
    assert stream(3, "x").random() == stream(3, "x").random()


def test_config_hash_ignores_output_location():
    a = tiny()
    assert a.hash() == a.with_overrides(output_dir="/elsewhere", name="other").hash()
    assert a.hash() != a.with_overrides(lam="5").hash()


def test_stage_settings():
    base = tiny()
    assert harness.stage_settings(base) == (True, True, True, 10.0, 0.1)
    assert harness.stage_settings(base.with_overrides(variant="vanilla")) == (False, True, True, 0.0, 0.0)
    assert harness.stage_settings(base.with_overrides(variant="wo_mig")) == (True, False, True, 0.0, 0.1)
    assert harness.stage_settings(base.with_overrides(variant="wo_adv")) == (True, True, True, 10.0, 0.0)
    assert harness.stage_settings(base.with_overrides(variant="wo_ssf")) == (False, True, True, 10.0, 0.1)
    assert harness.stage_settings(base.with_overrides(variant="wo_wei")) == (True, True, False, 10.0, 0.1)


def test_run_artifacts_and_determinism(tmp_path):
    cfg = tiny()
    a = harness.run(cfg, tmp_path / "a")
    b = harness.run(cfg, tmp_path / "b")
    assert (a / "aggregate.json").read_bytes() == (b / "aggregate.json").read_bytes()
    for seed in (0, 1):
        d = a / f"seed_{seed}"
        for name in ("report.json", "epoch_log.csv", "migration_trace.csv", "checkpoint.npz"):
            assert (d / name).exists()
        assert (d / "report.json").read_bytes() == (b / f"seed_{seed}" / "report.json").read_bytes()
        rows = list(csv.DictReader(open(d / "epoch_log.csv")))
        assert len(rows) == 8 and rows[0]["schema_version"] == "1"
    agg = harness.load_aggregate(a)
    assert agg["n_ok"] == 2 and not agg["partial"] and agg["schema_version"] == 1
    assert set(agg["auc"]) == {"mean", "std", "median", "values"}


def test_wo_mig_trace_has_no_flips(tmp_path):
    d = harness.run(tiny(variant="wo_mig", seeds="0"), tmp_path / "r")
    rows = list(csv.DictReader(open(d / "seed_0" / "migration_trace.csv")))
    assert len(rows) == 4
    assert all(r["n_flips_0to1"] == "0" and r["n_flips_1to0"] == "0" for r in rows)
    rep = json.loads((d / "seed_0" / "report.json").read_text())
    assert rep["n_flips"] == 0 and rep["pseudo_diff_fraction"] == 0.0


def test_vanilla_ignores_fairness_coefficients(tmp_path):
    a = harness.run(tiny(variant="vanilla", seeds="0"), tmp_path / "a")
    b = harness.run(tiny(variant="vanilla", seeds="0", alpha="0.2", gamma="1", **{"lambda": "20"},
                         beta="1"), tmp_path / "b")
    ra = json.loads((a / "seed_0" / "report.json").read_text())
    rb = json.loads((b / "seed_0" / "report.json").read_text())
    for k in ("auc", "delta_sp", "delta_eo", "group_stats", "best_epoch"):
        assert ra[k] == rb[k]


def test_evaluate_reproduces_reports(tmp_path):
    d = harness.run(tiny(), tmp_path / "r")
    res = harness.evaluate(d)
    assert set(res) == {0, 1} and all(same for _, same in res.values())


def test_seed_failure_is_recorded(tmp_path):
    d = harness.run(tiny(dataset=str(tmp_path / "missing"), seeds="0"), tmp_path / "r")
    agg = harness.load_aggregate(d)
    assert agg["partial"] and "0" in agg["errors"] and agg["n_ok"] == 0
    assert (d / "seed_0" / "error.txt").exists()


def _fake_run(root, name, auc, dsp, deo, dataset="synthetic:x", backbone="GCN"):
    d = root / name
    d.mkdir()
    agg = {"dataset": dataset, "backbone": backbone, "variant": name,
           "auc": {"mean": auc}, "delta_sp": {"mean": dsp}, "delta_eo": {"mean": deo}}
    (d / "aggregate.json").write_text(json.dumps(agg))
    return d


def test_compare_ranks(tmp_path):
    good = _fake_run(tmp_path, "good", 0.9, 0.1, 0.1)
    bad = _fake_run(tmp_path, "bad", 0.8, 0.2, 0.3)
    t = harness.compare([good, bad])
    assert [r["avg_rank"] for r in t] == [1.0, 2.0]
    t = harness.compare([good, good])
    assert [r["avg_rank"] for r in t] == [1.5, 1.5]
    # hand ranking: auc (c, a, b), dsp (b, c, a), deo (a, b=c)
    a = _fake_run(tmp_path, "a", 0.85, 0.30, 0.10)
    b = _fake_run(tmp_path, "b", 0.80, 0.10, 0.20)
    c = _fake_run(tmp_path, "c", 0.90, 0.20, 0.20)
    t = {r["variant"]: r for r in harness.compare([a, b, c])}
    assert [t[k]["auc_rank"] for k in "abc"] == [2.0, 3.0, 1.0]
    assert [t[k]["delta_sp_rank"] for k in "abc"] == [3.0, 1.0, 2.0]
    assert [t[k]["delta_eo_rank"] for k in "abc"] == [1.0, 2.5, 2.5]
    assert t["a"]["avg_rank"] == pytest.approx(2.0)
    assert t["b"]["avg_rank"] == pytest.approx(6.5 / 3)
    assert t["c"]["avg_rank"] == pytest.approx(5.5 / 3)


def test_compare_rejects_mismatch(tmp_path):
    a = _fake_run(tmp_path, "a", 0.9, 0.1, 0.1)
    b = _fake_run(tmp_path, "b", 0.9, 0.1, 0.1, backbone="JK")
    with pytest.raises(ComparisonError):
        harness.compare([a, b])
    with pytest.raises(ComparisonError):
        harness.compare([a])


def test_sweep_cardinality_and_single_cell(tmp_path):
    cfg = tiny(seeds="0")
    root, rows = harness.sweep(cfg, {"lambda": ["5", "10"], "beta": ["0.1", "1"]}, tmp_path / "sw")
    assert len(rows) == 4 and all(r["status"] == "ok" for r in rows)
    assert len(list(csv.DictReader(open(root / "sweep.csv")))) == 4
    root, rows = harness.sweep(cfg, {"lambda": ["10"]}, tmp_path / "one")
    direct = harness.load_aggregate(harness.run(cfg, tmp_path / "direct"))
    assert rows[0]["auc_mean"] == direct["auc"]["mean"]
    with pytest.raises(ConfigError):
        harness.sweep(cfg, {})


def test_sweep_marks_failed_cells(tmp_path):
    root, rows = harness.sweep(tiny(seeds="0"), {"alpha": ["0.5", "3"]}, tmp_path / "sw")
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("failed")


@pytest.mark.parametrize("backbone", ["JK", "APPNP"])
def test_other_backbones_run(tmp_path, backbone):
    d = harness.run(tiny(backbone=backbone, seeds="0"), tmp_path / "r")
    assert not harness.load_aggregate(d)["partial"]


# --------------------------------------------------------------------------
# command line


def test_cli_end_to_end(tmp_path, capsys):
    sets = [f"--set={k}={v}" for k, v in {**TINY, "seeds": "0", "name": "x"}.items()]
    assert cli.main(["train", *sets, "--output", str(tmp_path)]) == 0
    assert cli.main(["evaluate", str(tmp_path / "x")]) == 0
    assert "matches saved report" in capsys.readouterr().out
    assert cli.main(["train", *sets, "--set=name=y", "--set=variant=vanilla", "--output", str(tmp_path)]) == 0
    out = tmp_path / "rank.csv"
    assert cli.main(["compare", str(tmp_path / "x"), str(tmp_path / "y"), "--out", str(out)]) == 0
    assert len(list(csv.DictReader(open(out)))) == 2
    assert cli.main(["sweep", *sets, "--grid", "beta=0.1,1", "--output", str(tmp_path)]) == 0
    assert cli.main(["train", "--set", "alpha=7"]) == 2


def test_cli_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("".join(f"{k} = {v}\n" for k, v in {**TINY, "seeds": "0", "name": "f"}.items()))
    assert cli.main(["train", str(cfg), "--output", str(tmp_path)]) == 0
    assert (tmp_path / "f" / "aggregate.json").exists()


def test_cli_ablate(tmp_path, monkeypatch):
    monkeypatch.setenv("FAIRMIG_OUTPUT_ROOT", str(tmp_path))
    sets = [f"--set={k}={v}" for k, v in {**TINY, "seeds": "0", "name": "ab"}.items()]
    assert cli.main(["ablate", *sets]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ab_ablation" / "ranking.csv")))
    assert {r["variant"] for r in rows} == {"full", "wo_mig", "wo_adv", "wo_ssf", "wo_wei", "vanilla"}


def test_cli_synth_round_trip(tmp_path):
    out = tmp_path / "ds"
    assert cli.main(["synth", "--out", str(out), "--n-nodes", "80", "--seed", "3",
                     "--group-fractions", "0.5,0.5"]) == 0
    d = harness.run(tiny(dataset=str(out), seeds="0"), tmp_path / "r")
    rep = json.loads((d / "seed_0" / "report.json").read_text())
    assert rep["dataset"].startswith("file:") and np.isfinite(rep["auc"])
