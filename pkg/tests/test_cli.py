import hashlib
import json
import os
from pathlib import Path

import pytest
import yaml

from ufem import cli, synth
from ufem.config import ConfigError, RunConfig, apply_overrides, load_config


def tree_digest(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def clean(tmp_path_factory):
    return synth.write_tree(tmp_path_factory.mktemp("data") / "clean", n_per_class=2, seed=0)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_degrade_twice_byte_identical(clean, tmp_path):
    before = tree_digest(clean)
    assert run("degrade", "--kind", "fog", "--severity", 3, "--in", clean, "--out", tmp_path / "a", "--seed", 1) == 0
    assert run("degrade", "--kind", "fog", "--severity", 3, "--in", clean, "--out", tmp_path / "b", "--seed", 1) == 0
    a, b = tree_digest(tmp_path / "a"), tree_digest(tmp_path / "b")
    assert a == b and len(a) == 20 + 2
    assert tree_digest(clean) == before
    lines = (tmp_path / "a" / "labels.txt").read_text().splitlines()
    assert len(lines) == 20


def test_degraded_manifest_readable_from_other_cwd(clean, tmp_path, monkeypatch):
    from ufem.data import DatasetManifest
    monkeypatch.chdir(tmp_path)
    assert run("degrade", "--kind", "fog", "--severity", 3, "--in", clean, "--out", "out/fog") == 0
    m = DatasetManifest.read("out/fog/manifest.jsonl")
    assert len(m) == 20 and all(e.rendered for e in m.entries)
    assert m.load().shape == (20, 3, 32, 32)


def test_stage2_requires_stage1(clean, tmp_path, capsys):
    m = tmp_path / "m.jsonl"
    assert run("manifest", "--root", clean, "--out", m) == 0
    code = run("train-stage2", "--clear", m, "--degraded", m, "--run-dir", tmp_path / "r")
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0
    assert len(err) == 1 and err[0].startswith("error: DependencyError:") and "--stage1" in err[0]


def test_eval_with_missing_ufem(clean, tmp_path, capsys):
    m = tmp_path / "m.jsonl"
    run("manifest", "--root", clean, "--out", m)
    assert run("eval", "--manifest", m, "--ufem", tmp_path / "nope.ufnt", "--run-dir", tmp_path / "r") == 1
    assert "DependencyError" in capsys.readouterr().err


def test_config_rejects_unknown(tmp_path, capsys):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"stage1": {"lambda_cycle": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"training": {}})
    with pytest.raises(ConfigError):
        apply_overrides({}, ["stage2.nope=1"])
    bad = tmp_path / "bad.yaml"
    bad.write_text("stage1:\n  epoch: 3\n")
    assert run("train-stage1", "--config", bad, "--clear", "x", "--degraded", "y",
               "--run-dir", tmp_path / "r") == 2
    assert capsys.readouterr().err.startswith("error: ConfigError:")


def test_config_defaults_and_precedence(tmp_path):
    cfg = RunConfig()
    assert cfg.stage1.lambda_cyc == 10.0 and cfg.stage2.lambda_corr == 1000.0
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"stage1": {"epochs": 7, "batch": 3}}))
    c = load_config(p, ["stage1.epochs=9", "stage2.layer_weights=[1, 1, 1, 1]"])
    assert (c.stage1.epochs, c.stage1.batch, c.stage2.layer_weights) == (9, 3, (1.0, 1.0, 1.0, 1.0))
    assert RunConfig.from_dict(yaml.safe_load(c.to_yaml())) == c


def test_run_root_env(clean, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path / "root"))
    m = tmp_path / "m.jsonl"
    run("manifest", "--root", clean, "--out", m)
    assert run("eval", "--manifest", m, "--set", "eval.kind=none") == 0
    out = tmp_path / "root" / "eval"
    assert (out / "eval_baseline.json").exists() and (out / "config.yaml").exists()
    assert (out / "run.log").exists()


TINY = ["--set", "stage1.epochs=1", "--set", "stage1.g_base_width=4", "--set", "stage1.g_residual_blocks=1",
        "--set", "stage1.d_base_width=4", "--set", "stage2.epochs=1", "--set", "stage2.g_base_width=4",
        "--set", "stage2.g_residual_blocks=1", "--set", "stage2.d_base_width=4",
        "--set", "backbone.enhancement_tap=block1"]


def test_pipeline_end_to_end(clean, tmp_path):
    clear_m, fog_m = tmp_path / "clear.jsonl", tmp_path / "fog" / "manifest.jsonl"
    assert run("manifest", "--root", clean, "--out", clear_m) == 0
    assert run("degrade", "--kind", "fog", "--severity", 3, "--in", clean, "--out", tmp_path / "fog") == 0
    r1, r2, r3 = tmp_path / "s1", tmp_path / "s2", tmp_path / "c"
    assert run("train-stage1", *TINY, "--clear", clear_m, "--degraded", fog_m, "--run-dir", r1) == 0
    assert run("train-stage2", *TINY, "--clear", clear_m, "--degraded", fog_m,
               "--stage1", r1 / "stage1.ufnt", "--run-dir", r2) == 0
    assert run("compose", "--stage1", r1 / "stage1.ufnt", "--stage2", r2 / "stage2.ufnt", "--run-dir", r3) == 0
    for ufem in ([], ["--ufem", r3 / "ufem.ufnt"]):
        assert run("eval", "--manifest", clear_m, *ufem, "--run-dir", tmp_path / "e") == 0
    assert run("eval", "--manifest", clear_m, "--ufem", r3 / "ufem.ufnt", "--severities", 1, 3,
               "--plot", "--run-dir", tmp_path / "curve") == 0
    assert (tmp_path / "curve" / "severity_curve.png").stat().st_size > 0
    assert set(json.loads((tmp_path / "curve" / "severity_curve.json").read_text())["3"]) == {"baseline", "ufem"}
    assert run("ablate", "--manifest", clear_m, "--stage1", r1 / "stage1.ufnt", "--stage2", r2 / "stage2.ufnt",
               "--run-dir", tmp_path / "ab") == 0
    rows = (tmp_path / "ab" / "ablation.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in rows] == ["variant", "baseline", "S1 only", "S2 only", "S1+S2"]

    # rerunning stage-1 from its echoed config reproduces the checkpoint bitwise
    assert run("train-stage1", "--config", r1 / "config.yaml", "--clear", clear_m, "--degraded", fog_m,
               "--run-dir", tmp_path / "s1b") == 0
    assert (r1 / "stage1.ufnt").read_bytes() == (tmp_path / "s1b" / "stage1.ufnt").read_bytes()
    assert (r1 / "stage1_losses.jsonl").read_bytes() == (tmp_path / "s1b" / "stage1_losses.jsonl").read_bytes()
    assert json.loads((r2 / "inputs.json").read_text())["stage1"]


def test_dcp_report_command(clean, tmp_path):
    clear_m = tmp_path / "clear.jsonl"
    run("manifest", "--root", clean, "--out", clear_m)
    run("degrade", "--kind", "fog", "--severity", 3, "--in", clean, "--out", tmp_path / "fog")
    assert run("dcp-report", "--images", f"clear={clear_m}", "--images", f"fog={tmp_path / 'fog' / 'manifest.jsonl'}",
               "--plot", "--run-dir", tmp_path / "d") == 0
    rep = json.loads((tmp_path / "d" / "dcp_report.json").read_text())
    assert rep and (tmp_path / "d" / "dcp_tsne.png").exists()


def test_synth_and_train_backbone(tmp_path):
    assert run("synth", "--out", tmp_path / "t", "--n-per-class", 1, "--seed", 2) == 0
    m = tmp_path / "t.jsonl"
    run("manifest", "--root", tmp_path / "t", "--out", m)
    assert run("train-backbone", "--train", m, "--set", "backbone.train_epochs=1",
               "--out", tmp_path / "bb.ufnt", "--run-dir", tmp_path / "r") == 0
    from ufem.backbone import load_backbone
    assert load_backbone("tinyvgg", str(tmp_path / "bb.ufnt")).class_count == 10
