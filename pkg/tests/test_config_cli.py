import json
from pathlib import Path

import pytest
import yaml

from clue import cli, config
from clue.errors import ConfigurationError
from clue.pipeline import REPORT_FILES

MICRO = Path(__file__).resolve().parents[1] / "configs" / "micro.yaml"


def test_empty_document_gives_defaults():
    cfg = config.parse({})
    assert cfg.train.lambda_kl == 1e-3
    assert cfg.sample.sigmas == (0.0, 0.1, 0.3, 0.5)
    assert cfg.harness.ratios == tuple(range(0, 101, 10))
    assert cfg.model.d_style == 64


def test_round_trip_through_yaml():
    cfg = config.load(MICRO)
    again = config.parse(yaml.safe_load(config.dump(cfg)))
    assert again == cfg
    assert config.config_hash(again) == config.config_hash(cfg)


@pytest.mark.parametrize(
    "doc,field",
    [
        ({"trian": {}}, "trian"),
        ({"train": {"lamda_kl": 0.1}}, "train.lamda_kl"),
        ({"harness": {"classifier": {"width": [8]}}}, "harness.classifier.width"),
        ({"train": {"max_steps": "many"}}, "train.max_steps"),
        ({"sample": {"sigmas": [0.0, "x"]}}, "sample.sigmas[1]"),
        ({"train": {"lambda_kl": -1}}, "train.lambda_kl"),
        ({"eval": {"tau_policy": "mean"}}, "eval.tau_policy"),
        ({"model": {"resolution": 16}}, "model.resolution"),
        ({"sample": {"pool_percent": 200}}, "sample.pool_percent"),
    ],
)
def test_bad_config_names_the_field(doc, field):
    with pytest.raises(ConfigurationError) as err:
        config.parse(doc)
    assert err.value.field == field


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  lamda_kl: 0.1\n")
    assert cli.main(["prepare", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "train.lamda_kl" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_cli_unreadable_config(tmp_path):
    assert cli.run("prepare", tmp_path / "nope.yaml", out=tmp_path) == 2


def test_missing_input_quarantines_output(tmp_path, capsys):
    assert cli.run("train-gen", MICRO, out=tmp_path) == 1
    assert (tmp_path / "failed" / "train-gen").is_dir()
    assert not (tmp_path / "train-gen").exists()
    assert "missing input" in capsys.readouterr().err


def test_prepare_writes_manifests(tmp_path):
    assert cli.run("prepare", MICRO, out=tmp_path) == 0
    prep = tmp_path / "prepare"
    counts = {}
    for split in ("dataset1A", "dataset1B", "dataset2"):
        lines = (prep / f"{split}.jsonl").read_text().splitlines()
        counts[split] = len(lines)
        rec = json.loads(lines[0])
        assert (prep / rec["path"]).exists()
    assert counts == {"dataset1A": 27, "dataset1B": 9, "dataset2": 9}
    manifest = json.loads((prep / "run_manifest.json").read_text())
    assert manifest["master_seed"] == 0 and len(manifest["files"]) == 45 + 3
    assert manifest["config_sha256"] == config.config_hash(config.load(MICRO))


def test_seed_override_changes_data(tmp_path):
    from clue.dataprep import read_manifest

    assert cli.run("prepare", MICRO, seed=1, out=tmp_path / "a") == 0
    assert cli.run("prepare", MICRO, seed=2, out=tmp_path / "b") == 0
    manifest = json.loads((tmp_path / "a" / "prepare" / "run_manifest.json").read_text())
    assert manifest["master_seed"] == 1
    a = read_manifest(tmp_path / "a" / "prepare" / "dataset2.jsonl")
    b = read_manifest(tmp_path / "b" / "prepare" / "dataset2.jsonl")
    assert not (a.images == b.images).all()


def test_out_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.resolve_out(None) == tmp_path / "env"
    assert cli.resolve_out(str(tmp_path / "flag")) == tmp_path / "flag"


def test_full_micro_pipeline(tmp_path):
    assert cli.main(["all", "--config", str(MICRO), "--out", str(tmp_path), "--deterministic"]) == 0
    for name in REPORT_FILES:
        assert (tmp_path / "report" / name).exists()
    gen = tmp_path / "generate"
    assert sorted(p.name for p in gen.iterdir() if p.is_dir()) == ["sigma0.00", "sigma0.50"]
    # pool_percent 100 of 9 real images per class
    assert len((gen / "sigma0.50" / "run1" / "manifest.jsonl").read_text().splitlines()) == 27
    header = (tmp_path / "eval-gen" / "metrics.csv").read_text().splitlines()[0]
    assert header == "model_variant,sigma,split,class,metric,value"
    assert (tmp_path / "train-gen" / "curve.csv").read_text().count("\n") == 5
